//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application in creation order, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it once
//! in reverse. The tape is left intact after a backward pass; training code
//! builds a fresh graph per step.

use std::collections::HashMap;

use super::kernels::{self, gemm};
use super::{NdError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` matches the trailing dimensions of `a` and is repeated over the rest.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Pow(Var, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape: an ordered record of primitive applications.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(msg: String) -> NdError {
    NdError::Shape(msg)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Leaf that receives a gradient. Rejects non-finite values.
    pub fn input(&mut self, t: Tensor) -> Result<Var, NdError> {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient. Rejects non-finite values.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, NdError> {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var, NdError> {
        if !t.is_finite() {
            return Err(NdError::NonFinite("leaf tensor".into()));
        }
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    /// Places a stored parameter on the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_vars.insert(id, v);
        self.params.push((id, v));
        v
    }

    /// A gradient-stopped copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NdError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NdError> {
        self.same_shape(a, b, what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("add_broadcast: {:?} does not end with {:?}", sa, sb)));
        }
        let w = self.value(b).numel();
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % w]).collect();
        let value = Tensor::new(sa, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::AddBroadcast(a, b), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Natural log, guarded at the smallest positive normal.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(f64::MIN_POSITIVE).ln(), Op::Ln(x))
    }

    /// Elementwise `x^p`; `p == 0` yields ones with zero gradient.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| if p == 0.0 { 1.0 } else { v.powf(p) }, Op::Pow(x, p))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s: f64 = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), ng)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, NdError> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| shape_err("sum_last on a scalar".into()))?;
        let data = self.data(x).chunks(w.max(1)).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(&shape[..shape.len() - 1], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SumLast(x), ng))
    }

    /// Matrix product over the last two axes; rank-3 operands are batched.
    /// `ta`/`tb` transpose the respective operand's last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(shape_err(format!("matmul: unsupported ranks {:?} x {:?}", sa, sb)));
        }
        let r = sa.len();
        let batch = if r == 3 { sa[0] } else { 1 };
        if r == 3 && sb[0] != batch {
            return Err(shape_err(format!("matmul: batch {} vs {}", sa[0], sb[0])));
        }
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return Err(shape_err(format!("matmul: inner dimensions differ ({:?}{} x {:?}{})", sa, if ta { "ᵀ" } else { "" }, sb, if tb { "ᵀ" } else { "" })));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..batch {
                gemm(m, k, n, &ad[bi * m * k..], ta, &bd[bi * k * n..], tb, &mut out[bi * m * n..], 0.0);
            }
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, ta, tb, batch, m, k, n }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NdError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("permute: {:?} is not a permutation of rank {}", perm, shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::permute_into(self.data(x), &shape, perm, &mut out, false);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NdError> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, NdError> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat: axis {axis} out of range for {:?}", first)));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err(format!("concat: {:?} incompatible with {:?} on axis {axis}", s, first)));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NdError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(format!("narrow: [{start}, {}) out of range on axis {axis} of {:?}", start + len, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Narrow { x, axis, start }, ng))
    }

    /// Selects rows (first-axis slices) by index; repeated indices are allowed
    /// and their gradients are scatter-added. Also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, NdError> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| shape_err("gather_rows on a scalar".into()))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NdError::Index { index: bad, bound: rows });
        }
        let w: usize = shape[1..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(&xd[i * w..(i + 1) * w]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::GatherRows { x, index: index.to_vec() }, ng))
    }

    /// Channels-last 1-D convolution: `x [B, L, Cin]`, `w [K, Cin, Cout]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NdError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || self.shape(b) != [sw[2]] || stride == 0 {
            return Err(shape_err(format!("conv1d: x {:?}, w {:?}, b {:?}, stride {stride}", sx, sw, self.shape(b))));
        }
        let (batch, l_in, c_in) = (sx[0], sx[1], sx[2]);
        let (kernel, c_out) = (sw[0], sw[2]);
        if l_in + 2 * pad < kernel {
            return Err(shape_err(format!("conv1d: length {l_in} (pad {pad}) shorter than kernel {kernel}")));
        }
        let l_out = (l_in + 2 * pad - kernel) / stride + 1;
        let cols = kernels::im2col(self.data(x), batch, l_in, c_in, kernel, stride, pad, l_out);
        let mut out = vec![0.0; batch * l_out * c_out];
        gemm(batch * l_out, kernel * c_in, c_out, &cols, false, self.data(w), false, &mut out, 0.0);
        let bd = self.data(b);
        for row in out.chunks_mut(c_out) {
            row.iter_mut().zip(bd).for_each(|(o, bb)| *o += bb);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let value = Tensor::new(&[batch, l_out, c_out], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, stride, pad, cols }, ng))
    }

    /// Channels-last transposed 1-D convolution: `x [B, L, Cin]`,
    /// `w [Cin, K, Cout]`, `b [Cout]`; output length `(L-1)·stride − 2·pad + K`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NdError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[0] || self.shape(b) != [sw[2]] || stride == 0 {
            return Err(shape_err(format!("conv_transpose1d: x {:?}, w {:?}, b {:?}", sx, sw, self.shape(b))));
        }
        let (batch, l_in, c_in) = (sx[0], sx[1], sx[2]);
        let (kernel, c_out) = (sw[1], sw[2]);
        let full = (l_in - 1) * stride + kernel;
        if full <= 2 * pad {
            return Err(shape_err("conv_transpose1d: padding removes the whole output".into()));
        }
        let l_out = full - 2 * pad;
        let mut cols = vec![0.0; batch * l_in * kernel * c_out];
        gemm(batch * l_in, c_in, kernel * c_out, self.data(x), false, self.data(w), false, &mut cols, 0.0);
        // the transposed conv output is the adjoint of im2col applied to cols
        let mut out = vec![0.0; batch * l_out * c_out];
        convt_scatter(&cols, &mut out, batch, l_in, l_out, c_out, kernel, stride, pad);
        let bd = self.data(b);
        for row in out.chunks_mut(c_out) {
            row.iter_mut().zip(bd).for_each(|(o, bb)| *o += bb);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let value = Tensor::new(&[batch, l_out, c_out], out)?;
        Ok(self.push(value, Op::ConvTranspose1d { x, w, b, stride, pad }, ng))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NdError> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| shape_err("layer_norm on a scalar".into()))?;
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(shape_err(format!("layer_norm: width {w} vs gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta))));
        }
        let rows = self.value(x).numel() / w.max(1);
        let mut xhat = vec![0.0; rows * w];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * w];
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        for r in 0..rows {
            let row = &xd[r * w..(r + 1) * w];
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..w {
                let h = (row[i] - mu) * rs;
                xhat[r * w + i] = h;
                out[r * w + i] = h * gd[i] + bd[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NdError> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| shape_err("softmax on a scalar".into()))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(w.max(1)) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x), ng))
    }

    /// Weighted mean cross-entropy of `logits [n, k]` against class indices.
    /// Rows with zero weight contribute neither loss nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var, NdError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err(format!("cross_entropy: logits {:?} vs {} targets", shape, targets.len())));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(NdError::Index { index: bad, bound: k });
        }
        let weights = match weights {
            Some(w) if w.len() != n => return Err(shape_err(format!("cross_entropy: {} weights for {n} rows", w.len()))),
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(NdError::Empty("cross_entropy: no row carries weight".into()));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]]);
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss / total), Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs }, ng))
    }

    /// Forward value `value`; the incoming gradient passes to `src` unchanged.
    pub fn straight_through(&mut self, src: Var, value: Tensor) -> Result<Var, NdError> {
        if value.shape() != self.shape(src) {
            return Err(shape_err(format!("straight_through: {:?} vs {:?}", value.shape(), self.shape(src))));
        }
        let ng = self.ng(src);
        Ok(self.push(value, Op::StraightThrough(src), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NdError> {
        if self.value(loss).numel() != 1 {
            return Err(NdError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bd).for_each(|((d, g), y)| *d += g * y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(ad).for_each(|((d, g), x)| *d += g * x));
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                let w = self.value(*b).numel();
                acc(*b, &mut |d| {
                    for chunk in g.chunks(w) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            &Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |d| {
                    for bi in 0..batch {
                        let (gb, bb, db) = (&g[bi * m * n..], &bd[bi * k * n..], &mut d[bi * m * k..]);
                        if ta {
                            gemm(k, n, m, bb, tb, gb, true, db, 1.0);
                        } else {
                            gemm(m, n, k, gb, false, bb, !tb, db, 1.0);
                        }
                    }
                });
                acc(b, &mut |d| {
                    for bi in 0..batch {
                        let (gb, ab, db) = (&g[bi * m * n..], &ad[bi * m * k..], &mut d[bi * k * n..]);
                        if tb {
                            gemm(n, m, k, gb, true, ab, ta, db, 1.0);
                        } else {
                            gemm(k, m, n, ab, !ta, gb, false, db, 1.0);
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape = node.value.shape();
                acc(*x, &mut |d| kernels::permute_into(g, out_shape, &inv, d, true));
            }
            Op::Reshape(x) | Op::StraightThrough(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let block = self.shape(v)[*axis] * inner;
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            add_into(&mut d[o * block..(o + 1) * block], &g[o * total + offset..o * total + offset + block]);
                        }
                    });
                    offset += block;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(x);
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[axis];
                let full = in_shape[axis];
                acc(x, &mut |d| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let w = self.value(*x).numel() / self.shape(*x)[0].max(1);
                acc(*x, &mut |d| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut d[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            &Op::Conv1d { x, w, b, stride, pad, ref cols } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (batch, l_in, c_in) = (sx[0], sx[1], sx[2]);
                let (kernel, c_out) = (sw[0], sw[2]);
                let l_out = node.value.shape()[1];
                let rows = batch * l_out;
                acc(w, &mut |d| gemm(kernel * c_in, rows, c_out, cols, true, g, false, d, 1.0));
                acc(b, &mut |d| {
                    for row in g.chunks(c_out) {
                        add_into(d, row);
                    }
                });
                let wd = self.data(w);
                acc(x, &mut |d| {
                    let mut dcols = vec![0.0; rows * kernel * c_in];
                    gemm(rows, c_out, kernel * c_in, g, false, wd, true, &mut dcols, 0.0);
                    kernels::col2im_add(&dcols, d, batch, l_in, c_in, kernel, stride, pad, l_out);
                });
            }
            &Op::ConvTranspose1d { x, w, b, stride, pad } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (batch, l_in, c_in) = (sx[0], sx[1], sx[2]);
                let (kernel, c_out) = (sw[1], sw[2]);
                let l_out = node.value.shape()[1];
                let mut dcols = vec![0.0; batch * l_in * kernel * c_out];
                convt_gather(g, &mut dcols, batch, l_in, l_out, c_out, kernel, stride, pad);
                let (xd, wd) = (self.data(x), self.data(w));
                acc(w, &mut |d| gemm(c_in, batch * l_in, kernel * c_out, xd, true, &dcols, false, d, 1.0));
                acc(b, &mut |d| {
                    for row in g.chunks(c_out) {
                        add_into(d, row);
                    }
                });
                acc(x, &mut |d| gemm(batch * l_in, kernel * c_out, c_in, &dcols, false, wd, true, d, 1.0));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let w = self.value(*gamma).numel();
                let gd = self.data(*gamma);
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        d.iter_mut().zip(gr).zip(hr).for_each(|((d, g), h)| *d += g * h);
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(w) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    let mut dh = vec![0.0; w];
                    for (r, ((gr, hr), dr)) in g.chunks(w).zip(xhat.chunks(w)).zip(d.chunks_mut(w)).enumerate() {
                        for i in 0..w {
                            dh[i] = gr[i] * gd[i];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / w as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for i in 0..w {
                            dr[i] += rstd[r] * (dh[i] - mean_dh - hr[i] * mean_dhh);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let w = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((gr, yr), dr) in g.chunks(w).zip(out.chunks(w)).zip(d.chunks_mut(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for i in 0..w {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(xd).for_each(|((d, g), &v)| *d += g * kernels::gelu_grad(v)));
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xd).for_each(|((d, g), &v)| {
                        if v > 0.0 {
                            *d += g
                        }
                    })
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| d.iter_mut().zip(g).zip(out).for_each(|((d, g), y)| *d += g * y * (1.0 - y))),
            Op::Ln(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(xd).for_each(|((d, g), &v)| *d += g / v.max(f64::MIN_POSITIVE)));
            }
            &Op::Pow(x, p) => {
                if p != 0.0 {
                    let xd = self.data(x);
                    acc(x, &mut |d| d.iter_mut().zip(g).zip(xd).for_each(|((d, g), &v)| *d += g * p * v.powf(p - 1.0)));
                }
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumLast(x) => {
                let w = *self.shape(*x).last().unwrap();
                acc(*x, &mut |d| {
                    for (dr, gv) in d.chunks_mut(w.max(1)).zip(g) {
                        dr.iter_mut().for_each(|d| *d += gv);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let k = self.shape(*logits)[1];
                let total: f64 = weights.iter().sum();
                acc(*logits, &mut |d| {
                    for (i, (dr, pr)) in d.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let s = g[0] * weights[i] / total;
                        for c in 0..k {
                            dr[c] += s * pr[c];
                        }
                        dr[targets[i]] -= s;
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[allow(clippy::too_many_arguments)]
fn convt_scatter(cols: &[f64], out: &mut [f64], batch: usize, l_in: usize, l_out: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) {
    for b in 0..batch {
        for i in 0..l_in {
            let row = &cols[(b * l_in + i) * kernel * c_out..(b * l_in + i + 1) * kernel * c_out];
            for kk in 0..kernel {
                let pos = (i * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l_out {
                    let dst = (b * l_out + pos as usize) * c_out;
                    add_into(&mut out[dst..dst + c_out], &row[kk * c_out..(kk + 1) * c_out]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt_gather(g: &[f64], dcols: &mut [f64], batch: usize, l_in: usize, l_out: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) {
    for b in 0..batch {
        for i in 0..l_in {
            let row = &mut dcols[(b * l_in + i) * kernel * c_out..(b * l_in + i + 1) * kernel * c_out];
            for kk in 0..kernel {
                let pos = (i * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l_out {
                    let src = (b * l_out + pos as usize) * c_out;
                    row[kk * c_out..(kk + 1) * c_out].copy_from_slice(&g[src..src + c_out]);
                }
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if it does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds `scale ×` each parameter gradient into the store's accumulators.
    pub fn accumulate(&self, store: &mut ParamStore, scale: f64) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                let p = store.get_mut(id);
                p.grad.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g);
            }
        }
    }
}
