//! Layers composed from graph primitives.

use rand::Rng;

use super::params::{normal, xavier_uniform};
use super::{Graph, NdError, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(&format!("{name}.weight"), xavier_uniform(rng, d_in, d_out, &[d_in, d_out]), true);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]), false);
        Linear { weight, bias, d_in, d_out }
    }

    /// `x [n, d_in] -> [n, d_out]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NdError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[width], 1.0), false),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NdError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Scaled dot-product attention, composed from matmul and softmax.
/// `q [h, n, dh]`, `k`/`v` `[h, m, dh]` → `[h, n, dh]`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var, NdError> {
    let dh = *g.shape(q).last().expect("rank 3");
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores)?;
    g.matmul(attn, v)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
        }
    }

    /// `[B·n, w] -> [B·h, n, w/h]`
    fn split_heads(&self, g: &mut Graph, x: Var, batch: usize) -> Result<Var, NdError> {
        let (rows, w) = (g.shape(x)[0], g.shape(x)[1]);
        let (n, dh) = (rows / batch, w / self.heads);
        let x = g.reshape(x, &[batch, n, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * self.heads, n, dh])
    }

    /// Queries from `x [n, w]`, keys and values from `context [m, w]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Var) -> Result<Var, NdError> {
        self.forward_batched(g, store, x, context, 1)
    }

    /// `batch` independent sequences stacked row-wise: `x [B·n, w]`,
    /// `context [B·m, w]`.
    pub fn forward_batched(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Var, batch: usize) -> Result<Var, NdError> {
        let (rows, w) = (g.shape(x)[0], g.shape(x)[1]);
        if batch == 0 || rows % batch != 0 || !g.shape(context)[0].is_multiple_of(batch) {
            return Err(NdError::Shape(format!("attention: {rows} query rows and {} context rows do not split into {batch} sequences", g.shape(context)[0])));
        }
        let n = rows / batch;
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let (q, k, v) = (self.split_heads(g, q, batch)?, self.split_heads(g, k, batch)?, self.split_heads(g, v, batch)?);
        let y = scaled_dot_attention(g, q, k, v)?;
        let y = g.reshape(y, &[batch, self.heads, n, w / self.heads])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[rows, w])?;
        self.out.forward(g, store, y)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp { fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, rng), fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NdError> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm residual transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NdError> {
        self.forward_batched(g, store, x, 1)
    }

    /// Self-attention within each of `batch` row-stacked sequences.
    pub fn forward_batched(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize) -> Result<Var, NdError> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward_batched(g, store, h, h, batch)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// Learned table of `rows × width` vectors, used for position embeddings
/// and single trainable tokens.
pub fn embedding_param(store: &mut ParamStore, name: &str, rows: usize, width: usize, rng: &mut impl Rng) -> ParamId {
    store.add(name, normal(rng, 0.02, &[rows, width]), false)
}
