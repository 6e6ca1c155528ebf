//! Classification heads for emotion recognition and the asymmetric loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mae::argmax_rows;
use crate::ndauto::nn::{embedding_param, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock};
use crate::ndauto::{xavier_uniform, Graph, NdError, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    ClsLinear,
    Query2Emo,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::ClsLinear => "cls",
            HeadKind::Query2Emo => "query2emo",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(HeadKind::ClsLinear),
            "query2emo" => Ok(HeadKind::Query2Emo),
            _ => Err(Error::Config(format!("unknown head {s:?} (expected cls or query2emo)"))),
        }
    }
}

/// Linear map from the CLS latent to class logits.
#[derive(Clone, Debug)]
pub struct ClsLinearHead {
    pub linear: Linear,
}

impl ClsLinearHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, classes: usize, rng: &mut impl Rng) -> Self {
        ClsLinearHead { linear: Linear::new(store, name, width, classes, rng) }
    }

    /// `latent [B·S, W]`, CLS at row `b·S` → `[B, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: Var, batch: usize, seq_len: usize) -> Result<Var> {
        let cls: Vec<usize> = (0..batch).map(|b| b * seq_len).collect();
        let x = g.gather_rows(latent, &cls)?;
        Ok(self.linear.forward(g, store, x)?)
    }
}

/// Class-query cross-attention head: one self-attention block over the
/// tokens, then one decoder block whose queries are learned class embeddings.
#[derive(Clone, Debug)]
pub struct Query2EmoHead {
    pub classes: usize,
    queries: ParamId,
    encoder: TransformerBlock,
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl Query2EmoHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, classes: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Query2EmoHead {
            classes,
            queries: embedding_param(store, &format!("{name}.queries"), classes, width, rng),
            encoder: TransformerBlock::new(store, &format!("{name}.enc"), width, heads, 4, rng),
            ln_self: LayerNorm::new(store, &format!("{name}.dec.ln_self"), width),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.dec.self_attn"), width, heads, rng),
            ln_q: LayerNorm::new(store, &format!("{name}.dec.ln_q"), width),
            ln_kv: LayerNorm::new(store, &format!("{name}.dec.ln_kv"), width),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.dec.cross_attn"), width, heads, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.dec.ln_mlp"), width),
            mlp: Mlp::new(store, &format!("{name}.dec.mlp"), width, 4 * width, rng),
            proj_w: store.add(&format!("{name}.proj.weight"), xavier_uniform(rng, width, 1, &[classes, width]), true),
            proj_b: store.add(&format!("{name}.proj.bias"), Tensor::zeros(&[classes, 1]), false),
        }
    }

    /// `latent [B·S, W]` → `[B, C]`. Adds no positional terms.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: Var, batch: usize) -> Result<Var> {
        let c = self.classes;
        let tiles: Vec<usize> = (0..batch).flat_map(|_| 0..c).collect();
        let mem = self.encoder.forward_batched(g, store, latent, batch)?;

        let q = g.param(store, self.queries);
        let mut x = g.gather_rows(q, &tiles)?;
        let h = self.ln_self.forward(g, store, x)?;
        let a = self.self_attn.forward_batched(g, store, h, h, batch)?;
        x = g.add(x, a)?;
        let h = self.ln_q.forward(g, store, x)?;
        let kv = self.ln_kv.forward(g, store, mem)?;
        let a = self.cross_attn.forward_batched(g, store, h, kv, batch)?;
        x = g.add(x, a)?;
        let h = self.ln_mlp.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        x = g.add(x, m)?;

        let w = g.param(store, self.proj_w);
        let w = g.gather_rows(w, &tiles)?;
        let b = g.param(store, self.proj_b);
        let b = g.gather_rows(b, &tiles)?;
        let y = g.mul(x, w)?;
        let y = g.sum_last(y)?;
        let y = g.reshape(y, &[batch * c, 1])?;
        let y = g.add(y, b)?;
        Ok(g.reshape(y, &[batch, c])?)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    ClsLinear(ClsLinearHead),
    Query2Emo(Query2EmoHead),
}

impl Head {
    /// Registers head parameters under `head.` in `store`.
    pub fn new(kind: HeadKind, store: &mut ParamStore, width: usize, classes: usize, heads: usize, rng: &mut impl Rng) -> Self {
        match kind {
            HeadKind::ClsLinear => Head::ClsLinear(ClsLinearHead::new(store, "head.cls", width, classes, rng)),
            HeadKind::Query2Emo => Head::Query2Emo(Query2EmoHead::new(store, "head.q2e", width, classes, heads, rng)),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::ClsLinear(_) => HeadKind::ClsLinear,
            Head::Query2Emo(_) => HeadKind::Query2Emo,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: Var, batch: usize, seq_len: usize) -> Result<Var> {
        match self {
            Head::ClsLinear(h) => h.forward(g, store, latent, batch, seq_len),
            Head::Query2Emo(h) => h.forward(g, store, latent, batch),
        }
    }
}

/// Predicted classes: argmax per row, lowest index on ties.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    argmax_rows(logits)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        AslConfig { gamma_pos: 0.0, gamma_neg: 4.0, margin: 0.05 }
    }
}

impl AslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0 && (0.0..1.0).contains(&self.margin)) {
            return Err(Error::Config(format!("invalid asymmetric loss parameters {self:?}")));
        }
        Ok(())
    }
}

/// Asymmetric loss with one-hot targets: per sample
/// `−Σ_c [y (1−p)^γ⁺ ln p + (1−y) p_m^γ⁻ ln(1−p_m)]`, `p = σ(x)`,
/// `p_m = max(p − m, 0)`; averaged over the batch. `logits [B, C]`.
pub fn asymmetric_loss(g: &mut Graph, logits: Var, labels: &[usize], cfg: &AslConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Nd(NdError::Shape(format!("asymmetric_loss: logits {:?} vs {} labels", shape, labels.len()))));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Nd(NdError::Index { index: bad, bound: c }));
    }
    let y = Tensor::from_fn(&shape, |i| if labels[i / c] == i % c { 1.0 } else { 0.0 });
    let not_y = Tensor::from_fn(&shape, |i| 1.0 - y.data()[i]);
    let y = g.constant(y)?;
    let not_y = g.constant(not_y)?;

    let p = g.sigmoid(logits);
    let one_minus_p = g.scale(p, -1.0);
    let one_minus_p = g.add_scalar(one_minus_p, 1.0);
    let focus = g.pow(one_minus_p, cfg.gamma_pos);
    let lp = g.ln(p);
    let pos = g.mul(focus, lp)?;
    let pos = g.mul(pos, y)?;

    let pm = g.add_scalar(p, -cfg.margin);
    let pm = g.relu(pm);
    let focus = g.pow(pm, cfg.gamma_neg);
    let q = g.scale(pm, -1.0);
    let q = g.add_scalar(q, 1.0);
    let lq = g.ln(q);
    let neg = g.mul(focus, lq)?;
    let neg = g.mul(neg, not_y)?;

    let total = g.add(pos, neg)?;
    let s = g.sum(total);
    Ok(g.scale(s, -1.0 / labels.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndauto::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn asl_value(x: &[f64], c: usize, labels: &[usize], cfg: &AslConfig) -> f64 {
        let mut g = Graph::new();
        let v = g.input(Tensor::new(&[labels.len(), c], x.to_vec()).unwrap()).unwrap();
        let l = asymmetric_loss(&mut g, v, labels, cfg).unwrap();
        g.value(l).item()
    }

    #[test]
    fn asl_matches_scalar_hand_computation() {
        let got = asl_value(&[logit(0.7), logit(0.3)], 2, &[0], &AslConfig::default());
        let pm: f64 = 0.3 - 0.05;
        let want = -(0.7f64.ln()) - pm.powi(4) * (1.0 - pm).ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn asl_without_focusing_is_binary_cross_entropy() {
        let cfg = AslConfig { gamma_pos: 0.0, gamma_neg: 0.0, margin: 0.0 };
        let x = [0.3, -1.2, 2.0, 0.1, 0.0, -0.4];
        let labels = [2, 0];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut want = 0.0;
        for (b, &l) in labels.iter().enumerate() {
            for j in 0..3 {
                let p = sig(x[b * 3 + j]);
                want -= if j == l { p.ln() } else { (1.0 - p).ln() };
            }
        }
        assert!((asl_value(&x, 3, &labels, &cfg) - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let l = asl_value(&[40.0, -40.0, -40.0], 3, &[0], &AslConfig::default());
        assert!((0.0..1e-12).contains(&l), "{l}");
    }

    #[test]
    fn asl_rejects_bad_labels() {
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros(&[1, 3])).unwrap();
        assert!(asymmetric_loss(&mut g, v, &[3], &AslConfig::default()).is_err());
        assert!(asymmetric_loss(&mut g, v, &[0], &AslConfig { margin: 1.0, ..AslConfig::default() }).is_err());
    }

    #[test]
    fn asl_gradcheck_away_from_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        // keep every σ(x) at least 1e-3 away from the margin
        let vals: Vec<f64> = (0..12)
            .map(|_| loop {
                let v: f64 = rng.gen_range(-3.0..3.0);
                if (1.0 / (1.0 + (-v).exp()) - 0.05).abs() > 1e-3 {
                    break v;
                }
            })
            .collect();
        store.add("x", Tensor::new(&[3, 4], vals).unwrap(), false);
        let report = grad_check(
            &mut store,
            |g, s| {
                let x = g.param(s, s.id("x").unwrap());
                asymmetric_loss(g, x, &[1, 3, 0], &AslConfig::default()).map_err(|e| NdError::Shape(e.to_string()))
            },
            1e-6,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn zero_linear_head_predicts_class_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = ClsLinearHead::new(&mut store, "h", 8, 4, &mut rng);
        store.get_mut(head.linear.weight).value = Tensor::zeros(&[8, 4]);
        let mut g = Graph::new();
        let lat = g.input(Tensor::from_fn(&[6, 8], |i| i as f64)).unwrap();
        let y = head.forward(&mut g, &store, lat, 2, 3).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 8]);
        assert_eq!(predict(g.value(y)), vec![0, 0]);
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::from_fn(&[20, 5], |_| rng.gen_range(-2.0..2.0));
        let shifted = Tensor::new(&[20, 5], t.data().iter().map(|v| v + 3.25).collect()).unwrap();
        assert_eq!(predict(&t), predict(&shifted));
        assert_eq!(predict(&Tensor::new(&[1, 3], vec![1.0, 2.0, 2.0]).unwrap()), vec![1]);
    }

    fn q2e(width: usize, classes: usize, seed: u64) -> (Query2EmoHead, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = Query2EmoHead::new(&mut store, "q", width, classes, 4, &mut rng);
        (h, store, rng)
    }

    #[test]
    fn query2emo_emits_one_logit_per_class() {
        let (h, store, mut rng) = q2e(16, 8, 4);
        let mut g = Graph::new();
        let lat = g.input(Tensor::from_fn(&[10, 16], |_| rng.gen_range(-1.0..1.0))).unwrap();
        let y = h.forward(&mut g, &store, lat, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 8]);
        let one = g.input(Tensor::from_fn(&[1, 16], |_| rng.gen_range(-1.0..1.0))).unwrap();
        let y = h.forward(&mut g, &store, one, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 8]);
    }

    #[test]
    fn query2emo_is_invariant_to_token_order() {
        let (h, store, mut rng) = q2e(16, 4, 5);
        let x = Tensor::from_fn(&[6, 16], |_| rng.gen_range(-1.0..1.0));
        let perm = [4, 2, 0, 5, 1, 3];
        let px = Tensor::new(&[6, 16], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let mut g = Graph::new();
        let a = g.input(x).unwrap();
        let a = h.forward(&mut g, &store, a, 1).unwrap();
        let b = g.input(px).unwrap();
        let b = h.forward(&mut g, &store, b, 1).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn query2emo_gradcheck() {
        let (h, mut store, mut rng) = q2e(16, 4, 6);
        for p in store.params_mut() {
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let x = Tensor::from_fn(&[5, 16], |_| rng.gen_range(-1.0..1.0));
        let report = grad_check(
            &mut store,
            |g, s| {
                let lat = g.constant(x.clone())?;
                let y = h.forward(g, s, lat, 1).map_err(|e| NdError::Shape(e.to_string()))?;
                asymmetric_loss(g, y, &[2], &AslConfig { gamma_pos: 0.0, gamma_neg: 0.0, margin: 0.0 }).map_err(|e| NdError::Shape(e.to_string()))
            },
            1e-5,
            1e-4,
            24,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn head_kind_parses() {
        assert_eq!("cls".parse::<HeadKind>().unwrap(), HeadKind::ClsLinear);
        assert_eq!("query2emo".parse::<HeadKind>().unwrap(), HeadKind::Query2Emo);
        assert!("max".parse::<HeadKind>().is_err());
    }
}
