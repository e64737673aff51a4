//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles together
//! with the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar output with respect to every node that
//! requires one. Values are stored in `T`; reductions accumulate in `f64`.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of an overlapping patch extraction over an `H x W x C` image
/// stored as `(H*W) x C` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    /// Token grid extent `(H', W')`.
    pub grid: (usize, usize),
}

impl PatchLayout {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_width(&self) -> usize {
        self.patch.0 * self.patch.1 * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Visits every in-bounds `(token, slot, pixel)` triple, where `slot`
    /// indexes the `(di, dj)` position inside the patch.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = self.patch;
        let (sh, sw) = self.stride;
        let (qh, qw) = self.pad;
        for ti in 0..self.grid.0 {
            for tj in 0..self.grid.1 {
                let token = ti * self.grid.1 + tj;
                for di in 0..ph {
                    let r = (ti * sh + di) as isize - qh as isize;
                    if r < 0 || r >= self.height as isize {
                        continue;
                    }
                    for dj in 0..pw {
                        let c = (tj * sw + dj) as isize - qw as isize;
                        if c < 0 || c >= self.width as isize {
                            continue;
                        }
                        f(token, di * pw + dj, r as usize * self.width + c as usize);
                    }
                }
            }
        }
    }

    /// Number of patches covering each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.pixels()];
        self.visit(|_, _, p| count[p] += 1);
        count
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Im2Col { x: Var, layout: PatchLayout },
    FoldAvg { x: Var, layout: PatchLayout, inv_count: Vec<T> },
    L2NormRows { x: Var, eps: f64, norms: Vec<f64> },
    SteSign(Var),
    EntropyReg { x: Var, alpha: f64 },
    BceLogits { x: Var, target: Vec<T> },
    WeightedMse { x: Var, target: Vec<T>, row_w: Vec<T> },
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients aligned with the parameter store; parameters that did not
    /// take part in the computation get zeros.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> =
            store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.index()] = g.clone();
            }
        }
        out
    }

    /// Accumulate parameter gradients into `acc`.
    pub fn accumulate_params(&self, acc: &mut [Tensor<T>]) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                acc[id.index()].add_assign(g);
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary entropy (nats) of `sigmoid(z)`, stable for large `|z|`.
fn entropy_of_logit(z: f64) -> f64 {
    softplus(z) - sigmoid(z) * z
}

fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0);
    let q = (1.0 - p).max(0.0);
    let mut h = -p * p.ln();
    if q > 0.0 {
        h -= q * q.ln();
    }
    h
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Broadcast-add a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).len() != n {
            return Err(Error::shape(format!("row bias of {} for {m}x{n}", self.value(b).len())));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone().reshape(&[m, n])?;
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let x = v.f64();
            T::lit(0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
        });
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer norm affine width"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j].f64() - mean) * r;
                xhat[i * n + j] = T::lit(h);
                out[i * n + j] = T::lit(h * g[j].f64() + b[j].f64());
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..n {
                out[i * n + j] = T::lit(exps[j] / s);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[m, n], out).expect("shape"), Op::SoftmaxRows(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::shape(format!("columns {start}..{} of {n}", start + len)));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.dims(xs[0]).0;
        let widths: Vec<usize> = xs.iter().map(|&v| self.dims(v).1).collect();
        if xs.iter().any(|&v| self.dims(v).0 != m) {
            return Err(Error::shape("concat_cols row counts differ"));
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatCols(xs.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return Err(Error::shape(format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[len, n], out)?, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let n = self.dims(xs[0]).1;
        if xs.iter().any(|&v| self.dims(v).1 != n) {
            return Err(Error::shape("concat_rows widths differ"));
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
            m += self.dims(v).0;
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatRows(xs.to_vec()), ng))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape(format!("row index {bad} out of {m}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), n], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            ng,
        ))
    }

    /// Zero-padded overlapping patch extraction: `(H*W) x C` into
    /// `(H'*W') x (ph*pw*C)`.
    pub fn im2col(&mut self, x: Var, layout: PatchLayout) -> Result<Var> {
        let (m, c) = self.dims(x);
        if m != layout.pixels() || c != layout.channels {
            return Err(Error::shape(format!(
                "im2col input {m}x{c}, layout expects {}x{}",
                layout.pixels(),
                layout.channels
            )));
        }
        let tw = layout.token_width();
        let mut out = vec![T::zero(); layout.tokens() * tw];
        let xv = self.value(x).data();
        layout.visit(|t, s, p| {
            out[t * tw + s * c..t * tw + (s + 1) * c].copy_from_slice(&xv[p * c..(p + 1) * c]);
        });
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[layout.tokens(), tw], out)?, Op::Im2Col { x, layout }, ng))
    }

    /// Inverse of [`Graph::im2col`]: every token row writes its patch back and
    /// overlapping contributions are averaged by coverage count. The padding
    /// border is dropped.
    pub fn fold_avg(&mut self, x: Var, layout: PatchLayout) -> Result<Var> {
        let (m, tw) = self.dims(x);
        if m != layout.tokens() || tw != layout.token_width() {
            return Err(Error::shape(format!(
                "fold input {m}x{tw}, layout expects {}x{}",
                layout.tokens(),
                layout.token_width()
            )));
        }
        let count = layout.coverage();
        if let Some(p) = count.iter().position(|&c| c == 0) {
            return Err(Error::config(format!(
                "pixel ({}, {}) is not covered by any patch",
                p / layout.width,
                p % layout.width
            )));
        }
        let inv_count: Vec<T> = count.iter().map(|&c| T::lit(1.0 / c as f64)).collect();
        let c = layout.channels;
        let mut acc = vec![0.0f64; layout.pixels() * c];
        let xv = self.value(x).data();
        layout.visit(|t, s, p| {
            for ch in 0..c {
                acc[p * c + ch] += xv[t * tw + s * c + ch].f64();
            }
        });
        let out: Vec<T> = acc
            .iter()
            .enumerate()
            .map(|(i, &v)| T::lit(v) * inv_count[i / c])
            .collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[layout.pixels(), c], out)?,
            Op::FoldAvg { x, layout, inv_count },
            ng,
        ))
    }

    /// `x / (||x|| + eps)` per row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.value(x).data();
        let mut norms = vec![0.0; m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let nr = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            norms[i] = nr;
            for j in 0..n {
                out[i * n + j] = T::lit(row[j].f64() / (nr + eps));
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[m, n], out).expect("shape"), Op::L2NormRows { x, eps, norms }, ng)
    }

    /// Sign with `sign(0) = +1`; the backward pass is the identity.
    pub fn ste_sign(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v >= T::zero() { T::one() } else { -T::one() });
        let ng = self.ng(x);
        self.push(out, Op::SteSign(x), ng)
    }

    /// Factorized per-bit entropy surrogate over the rows of `x`
    /// (`tokens x bits`): mean per-token bit entropy minus the entropy of the
    /// batch-average bit probability, summed over bits. `p = sigmoid(alpha x)`.
    pub fn entropy_reg(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m == 0 {
            return Err(Error::shape("entropy regularizer on an empty batch"));
        }
        let terms = entropy_terms(self.value(x), alpha);
        let loss = terms.token_entropy - terms.batch_entropy;
        let ng = self.ng(x);
        let _ = n;
        Ok(self.push(Tensor::scalar(T::lit(loss)), Op::EntropyReg { x, alpha }, ng))
    }

    /// Mean binary cross-entropy between logits and `{0, 1}` targets.
    pub fn bce_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        self.value(x).same_shape(target)?;
        let n = target.len() as f64;
        let loss: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(z, y)| softplus(z.f64()) - y.f64() * z.f64())
            .sum::<f64>()
            / n;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::BceLogits { x, target: target.data().to_vec() },
            ng,
        ))
    }

    /// `mean_{i,j} w_i (x_ij - t_ij)^2` over an `m x n` matrix with per-row weights.
    pub fn weighted_mse(&mut self, x: Var, target: &Tensor<T>, row_w: &[T]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if target.len() != m * n || row_w.len() != m {
            return Err(Error::shape(format!(
                "weighted mse on {m}x{n} with {} targets and {} weights",
                target.len(),
                row_w.len()
            )));
        }
        let xv = self.value(x).data();
        let mut acc = 0.0;
        for i in 0..m {
            let w = row_w[i].f64();
            for j in 0..n {
                let d = xv[i * n + j].f64() - target.data()[i * n + j].f64();
                acc += w * d * d;
            }
        }
        let loss = acc / (m * n) as f64;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::WeightedMse { x, target: target.data().to_vec(), row_w: row_w.to_vec() },
            ng,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum_f64() / v.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::lit(m)), Op::Mean(x), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| p.index());
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2();
                let n = bv.dims2().1;
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(gd, bv.data(), m, n, k, T::zero(), &mut da);
                    send(*a, Tensor::new(av.shape(), da)?);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), gd, k, m, n, T::zero(), &mut db);
                    send(*b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::MatMulNT(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2();
                let n = bv.dims2().0;
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(gd, bv.data(), m, n, k, T::zero(), &mut da);
                    send(*a, Tensor::new(av.shape(), da)?);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(gd, av.data(), n, m, k, T::zero(), &mut db);
                    send(*b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone().reshape(self.value(*a).shape())?);
                send(*b, g.clone().reshape(self.value(*b).shape())?);
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                let mut db = vec![0.0f64; n];
                for row in gd.chunks(n) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v.f64();
                    }
                }
                send(*x, g.clone().reshape(self.value(*x).shape())?);
                send(*b, Tensor::new(self.value(*b).shape(), db.into_iter().map(T::lit).collect())?);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    send(*a, g.zip_map(bv, |x, y| x * y)?);
                }
                if self.ng(*b) {
                    send(*b, g.zip_map(av, |x, y| x * y)?);
                }
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * *s)),
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| {
                    let x = xv.f64();
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gv * T::lit(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })?;
                send(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = self.dims(*x);
                let gam = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0f64; n];
                    let mut dbeta = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = gd[i * n + j].f64();
                            dg[j] += gv * xhat[i * n + j].f64();
                            dbeta[j] += gv;
                        }
                    }
                    send(*gamma, Tensor::new(self.value(*gamma).shape(), dg.into_iter().map(T::lit).collect())?);
                    send(*beta, Tensor::new(self.value(*beta).shape(), dbeta.into_iter().map(T::lit).collect())?);
                }
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gd[i * n + j].f64() * gam[j].f64();
                            mean_d += d;
                            mean_dh += d * xhat[i * n + j].f64();
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = gd[i * n + j].f64() * gam[j].f64();
                            let h = xhat[i * n + j].f64();
                            dx[i * n + j] = T::lit(rstd[i] * (d - mean_d - h * mean_dh));
                        }
                    }
                    send(*x, Tensor::new(self.value(*x).shape(), dx)?);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = y.dims2();
                let yd = y.data();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| gd[i * n + j].f64() * yd[i * n + j].f64()).sum();
                    for j in 0..n {
                        dx[i * n + j] = T::lit(yd[i * n + j].f64() * (gd[i * n + j].f64() - dot));
                    }
                }
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::Transpose(x) => {
                send(*x, g.transpose().reshape(self.value(*x).shape())?);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = g.dims2().1;
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::ConcatCols(xs) => {
                let (m, n) = g.dims2();
                let mut off = 0;
                for &v in xs {
                    let w = self.dims(v).1;
                    if self.ng(v) {
                        let mut dx = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dx.extend_from_slice(&gd[i * n + off..i * n + off + w]);
                        }
                        send(v, Tensor::new(self.value(v).shape(), dx)?);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.dims(*x);
                let mut dx = vec![T::zero(); m * n];
                dx[start * n..start * n + gd.len()].copy_from_slice(gd);
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = self.value(v).len();
                    if self.ng(v) {
                        send(v, Tensor::new(self.value(v).shape(), gd[off..off + len].to_vec())?);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let (m, n) = self.dims(*x);
                let mut dx = vec![T::zero(); m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += gd[r * n + j];
                    }
                }
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::Im2Col { x, layout } => {
                let c = layout.channels;
                let tw = layout.token_width();
                let mut dx = vec![T::zero(); layout.pixels() * c];
                layout.visit(|t, s, p| {
                    for ch in 0..c {
                        dx[p * c + ch] += gd[t * tw + s * c + ch];
                    }
                });
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::FoldAvg { x, layout, inv_count } => {
                let c = layout.channels;
                let tw = layout.token_width();
                let mut dx = vec![T::zero(); layout.tokens() * tw];
                layout.visit(|t, s, p| {
                    for ch in 0..c {
                        dx[t * tw + s * c + ch] = gd[p * c + ch] * inv_count[p];
                    }
                });
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::L2NormRows { x, eps, norms } => {
                let (m, n) = self.dims(*x);
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let nr = norms[i];
                    let denom = nr + eps;
                    let dot: f64 = (0..n).map(|j| xv[i * n + j].f64() * gd[i * n + j].f64()).sum();
                    let corr = if nr > 0.0 { dot / (nr * denom * denom) } else { 0.0 };
                    for j in 0..n {
                        dx[i * n + j] =
                            T::lit(gd[i * n + j].f64() / denom - xv[i * n + j].f64() * corr);
                    }
                }
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::SteSign(x) => send(*x, g.clone()),
            Op::EntropyReg { x, alpha } => {
                let (m, n) = self.dims(*x);
                let xv = self.value(*x).data();
                let up = gd[0].f64();
                let mut pbar = vec![0.0f64; n];
                for i in 0..m {
                    for j in 0..n {
                        pbar[j] += sigmoid(alpha * xv[i * n + j].f64());
                    }
                }
                let logit_bar: Vec<f64> = pbar
                    .iter()
                    .map(|p| {
                        let p = (p / m as f64).clamp(1e-12, 1.0 - 1e-12);
                        (p / (1.0 - p)).ln()
                    })
                    .collect();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let z = alpha * xv[i * n + j].f64();
                        let p = sigmoid(z);
                        // dH/dp = -logit(p)
                        let dh = -z + logit_bar[j];
                        dx[i * n + j] = T::lit(up * dh * alpha * p * (1.0 - p) / m as f64);
                    }
                }
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::BceLogits { x, target } => {
                let up = gd[0].f64();
                let nn = target.len() as f64;
                let dx: Vec<T> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(z, y)| T::lit(up * (sigmoid(z.f64()) - y.f64()) / nn))
                    .collect();
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::WeightedMse { x, target, row_w } => {
                let (m, n) = self.dims(*x);
                let up = gd[0].f64();
                let xv = self.value(*x).data();
                let scale = 2.0 * up / (m * n) as f64;
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let w = row_w[i].f64() * scale;
                    for j in 0..n {
                        dx[i * n + j] = T::lit(w * (xv[i * n + j].f64() - target[i * n + j].f64()));
                    }
                }
                send(*x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let v = gd[0] / T::lit(len as f64);
                send(*x, Tensor::full(self.value(*x).shape(), v));
            }
        }
        Ok(())
    }
}

/// Components of the per-bit entropy surrogate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyTerms {
    /// Sum over bits of the mean per-token entropy.
    pub token_entropy: f64,
    /// Sum over bits of the entropy of the batch-average probability.
    pub batch_entropy: f64,
}

pub fn entropy_terms<T: Real>(x: &Tensor<T>, alpha: f64) -> EntropyTerms {
    let (m, n) = x.dims2();
    let xv = x.data();
    let mut token = 0.0;
    let mut pbar = vec![0.0f64; n];
    for i in 0..m {
        for j in 0..n {
            let z = alpha * xv[i * n + j].f64();
            token += entropy_of_logit(z);
            pbar[j] += sigmoid(z);
        }
    }
    let batch = pbar.iter().map(|p| binary_entropy(p / m as f64)).sum();
    EntropyTerms { token_entropy: token / m as f64, batch_entropy: batch }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_backward_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        let gr = g.backward(c).unwrap();
        assert_eq!(gr.of(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(gr.of(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let c = g.mul(a, b).unwrap();
        let gr = g.backward(c).unwrap();
        assert!(gr.of(a).is_none());
        assert_eq!(gr.of(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn fold_of_im2col_is_identity_on_covered_pixels() {
        let layout = PatchLayout {
            height: 6,
            width: 5,
            channels: 2,
            patch: (3, 3),
            stride: (2, 2),
            pad: (1, 1),
            grid: (3, 3),
        };
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[30, 2], (0..60).map(f64::from).collect()).unwrap());
        let cols = g.im2col(x, layout).unwrap();
        let back = g.fold_avg(cols, layout).unwrap();
        assert!(g.value(back).max_abs_diff(g.value(x)) < 1e-12);
    }

    #[test]
    fn fold_rejects_uncovered_pixels() {
        let layout = PatchLayout {
            height: 4,
            width: 4,
            channels: 1,
            patch: (1, 1),
            stride: (2, 2),
            pad: (0, 0),
            grid: (2, 2),
        };
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 1]));
        assert!(matches!(g.fold_avg(x, layout), Err(Error::Config(_))));
    }

    #[test]
    fn ste_sign_ties_to_plus_one() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[3], vec![0.3, -0.2, 0.0]).unwrap());
        let s = g.ste_sign(x);
        assert_eq!(g.value(s).data(), &[1.0, -1.0, 1.0]);
    }
}
