//! Asymmetric masked autoencoder over embedded tokens.
//!
//! The encoder sees only visible tokens plus a trainable CLS token; the
//! shallower decoder sees the full grid, with masked slots filled by a
//! trainable mask vector, and predicts codebook indices for every slot.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndauto::nn::{embedding_param, LayerNorm, Linear, TransformerBlock};
use crate::ndauto::{Graph, NdError, ParamId, ParamStore, Tensor, Var};
use crate::tokens::{DiscreteTokens, EmbeddingTable, MaskPlan, TokenGeometry};
use crate::vqvae::QuantizedGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct MaeConfig {
    pub t: usize,
    pub d: usize,
    /// Frames per training segment; must hold whole tokens.
    pub frames: usize,
    /// Latent width `D′` of the quantized grid.
    pub width: usize,
    pub code_dim: usize,
    pub codes: usize,
    pub depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub train_embedding: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig { t: 10, d: 4, frames: 100, width: 64, code_dim: 8, codes: 256, depth: 12, decoder_depth: 4, heads: 4, mlp_ratio: 4, train_embedding: true }
    }
}

impl MaeConfig {
    pub fn geometry(&self) -> Result<TokenGeometry> {
        TokenGeometry::new(self.frames, self.width, self.t, self.d)
    }

    /// Token width `t·d·e`.
    pub fn token_width(&self) -> usize {
        self.t * self.d * self.code_dim
    }

    pub fn validate(&self) -> Result<()> {
        let geo = self.geometry()?;
        if geo.frames() != self.frames {
            return Err(Error::Config(format!("segment of {} frames is not a multiple of t={}", self.frames, self.t)));
        }
        if self.decoder_depth == 0 || self.depth <= self.decoder_depth {
            return Err(Error::Config(format!("encoder depth {} must exceed decoder depth {} (and both be positive)", self.depth, self.decoder_depth)));
        }
        if self.heads == 0 || !self.token_width().is_multiple_of(self.heads) {
            return Err(Error::Config(format!("token width {} is not divisible by {} heads", self.token_width(), self.heads)));
        }
        if self.codes < 2 || self.mlp_ratio == 0 {
            return Err(Error::Config("need at least 2 codes and a positive MLP ratio".into()));
        }
        Ok(())
    }
}

/// Encoder output for a batch of row-stacked sequences.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B·(V+1), W]`; row `b·(V+1)` is sequence `b`'s CLS latent.
    pub latent: Var,
    pub batch: usize,
    /// Sequence length `V + 1`.
    pub seq_len: usize,
    /// Visible grid positions per sequence, ascending.
    pub visible: Vec<Vec<usize>>,
}

impl Encoded {
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len).collect()
    }
}

/// Value of one masked-pretraining step.
#[derive(Clone, Debug)]
pub struct PretrainStep {
    pub loss: Var,
    pub encoder_len: usize,
    pub masked_correct: usize,
    pub masked_total: usize,
}

#[derive(Clone, Debug)]
pub struct Mae {
    pub cfg: MaeConfig,
    pub store: ParamStore,
    pub embed: ParamId,
    enc_pos: ParamId,
    cls: ParamId,
    cls_pos: ParamId,
    enc_blocks: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    mask_token: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl Mae {
    pub fn new(cfg: MaeConfig, table: &EmbeddingTable, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if table.codes_len() != cfg.codes || table.code_dim() != cfg.code_dim {
            return Err(Error::Config(format!("embedding table is {}×{}, model expects {}×{}", table.codes_len(), table.code_dim(), cfg.codes, cfg.code_dim)));
        }
        let n = cfg.geometry()?.num_tokens();
        let w = cfg.token_width();
        let mut store = ParamStore::new();
        let embed = store.add("embed.codes", table.codes.clone(), false);
        store.get_mut(embed).trainable = cfg.train_embedding && table.trainable;
        let enc_pos = embedding_param(&mut store, "enc.pos", n, w, rng);
        let cls = embedding_param(&mut store, "enc.cls", 1, w, rng);
        let cls_pos = embedding_param(&mut store, "enc.cls_pos", 1, w, rng);
        let enc_blocks = (0..cfg.depth).map(|i| TransformerBlock::new(&mut store, &format!("enc.block{i}"), w, cfg.heads, cfg.mlp_ratio, rng)).collect();
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", w);
        let mask_token = embedding_param(&mut store, "dec.mask_token", 1, w, rng);
        let dec_pos = embedding_param(&mut store, "dec.pos", n, w, rng);
        let dec_blocks =
            (0..cfg.decoder_depth).map(|i| TransformerBlock::new(&mut store, &format!("dec.block{i}"), w, cfg.heads, cfg.mlp_ratio, rng)).collect();
        let dec_norm = LayerNorm::new(&mut store, "dec.norm", w);
        let head = Linear::new(&mut store, "dec.head", w, cfg.t * cfg.d * cfg.codes, rng);
        Ok(Mae { cfg, store, embed, enc_pos, cls, cls_pos, enc_blocks, enc_norm, mask_token, dec_pos, dec_blocks, dec_norm, head })
    }

    pub fn num_tokens(&self) -> usize {
        self.store.value(self.enc_pos).shape()[0]
    }

    pub fn token_width(&self) -> usize {
        self.cfg.token_width()
    }

    fn check_tokens(&self, tokens: &[DiscreteTokens]) -> Result<()> {
        let want = self.cfg.geometry()?;
        match tokens.iter().find(|x| x.geometry != want) {
            Some(x) => Err(Error::Config(format!("token geometry {:?} does not match the model's {:?}", x.geometry, want))),
            None if tokens.is_empty() => Err(Error::Data("empty batch".into())),
            None => Ok(()),
        }
    }

    /// Continuous embeddings of a batch, `[B·N, W]`.
    pub fn embed_batch(&self, g: &mut Graph, tokens: &[DiscreteTokens]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = g.param(&self.store, self.embed);
        let k = self.cfg.codes;
        let idx: Vec<usize> = tokens.iter().flat_map(|x| x.tokens.iter().copied()).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(NdError::Index { index: bad, bound: k }.into());
        }
        let rows = g.gather_rows(table, &idx)?;
        Ok(g.reshape(rows, &[tokens.len() * self.num_tokens(), self.token_width()])?)
    }

    fn add_positions(&self, g: &mut Graph, x: Var, pos: ParamId, batch: usize) -> Result<Var> {
        let (n, w) = (self.num_tokens(), self.token_width());
        let p = g.param(&self.store, pos);
        let x = g.reshape(x, &[batch, n, w])?;
        let x = g.add_broadcast(x, p)?;
        Ok(g.reshape(x, &[batch * n, w])?)
    }

    /// Runs the encoder on the visible tokens of `embedded [B·N, W]`.
    pub fn encode_visible(&self, g: &mut Graph, embedded: Var, plans: &[MaskPlan]) -> Result<Encoded> {
        let (n, w) = (self.num_tokens(), self.token_width());
        let batch = plans.len();
        if batch == 0 || g.shape(embedded) != [batch * n, w] {
            return Err(Error::Config(format!("encoder input {:?} does not match {batch} plans over {n} tokens of width {w}", g.shape(embedded))));
        }
        if let Some(p) = plans.iter().find(|p| p.num_tokens() != n) {
            return Err(Error::Config(format!("mask plan covers {} tokens, model has {n}", p.num_tokens())));
        }
        let visible: Vec<Vec<usize>> = plans.iter().map(MaskPlan::visible_indices).collect();
        let v = visible[0].len();
        if visible.iter().any(|x| x.len() != v) {
            return Err(Error::Config("mask plans in one batch must hide the same number of tokens".into()));
        }
        let x = self.add_positions(g, embedded, self.enc_pos, batch)?;
        let cls = g.param(&self.store, self.cls);
        let cls_pos = g.param(&self.store, self.cls_pos);
        let cls = g.add(cls, cls_pos)?;
        let pool = g.concat(&[x, cls], 0)?;
        let mut index = Vec::with_capacity(batch * (v + 1));
        for (b, vis) in visible.iter().enumerate() {
            index.push(batch * n);
            index.extend(vis.iter().map(|&i| b * n + i));
        }
        let mut h = g.gather_rows(pool, &index)?;
        for blk in &self.enc_blocks {
            h = blk.forward_batched(g, &self.store, h, batch)?;
        }
        let latent = self.enc_norm.forward(g, &self.store, h)?;
        Ok(Encoded { latent, batch, seq_len: v + 1, visible })
    }

    /// Encoder over all tokens (no masking), as used for fine-tuning.
    pub fn encode_all(&self, g: &mut Graph, tokens: &[DiscreteTokens]) -> Result<Encoded> {
        let x = self.embed_batch(g, tokens)?;
        let plans = vec![MaskPlan::none(self.num_tokens()); tokens.len()];
        self.encode_visible(g, x, &plans)
    }

    /// Decoder hidden states for every grid slot, `[B·N, W]`.
    fn decoder_hidden(&self, g: &mut Graph, enc: &Encoded) -> Result<Var> {
        let n = self.num_tokens();
        let rows = enc.batch * enc.seq_len;
        if g.shape(enc.latent)[0] != rows {
            return Err(Error::Config(format!("encoder output has {} rows, plans imply {rows}", g.shape(enc.latent)[0])));
        }
        let mask = g.param(&self.store, self.mask_token);
        let pool = g.concat(&[enc.latent, mask], 0)?;
        let mut index = vec![rows; enc.batch * n];
        for (b, vis) in enc.visible.iter().enumerate() {
            for (r, &i) in vis.iter().enumerate() {
                index[b * n + i] = b * enc.seq_len + 1 + r;
            }
        }
        let x = g.gather_rows(pool, &index)?;
        let mut h = self.add_positions(g, x, self.dec_pos, enc.batch)?;
        for blk in &self.dec_blocks {
            h = blk.forward_batched(g, &self.store, h, enc.batch)?;
        }
        Ok(self.dec_norm.forward(g, &self.store, h)?)
    }

    fn head_logits(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let rows = g.shape(h)[0];
        let y = self.head.forward(g, &self.store, h)?;
        Ok(g.reshape(y, &[rows * self.cfg.t * self.cfg.d, self.cfg.codes])?)
    }

    /// Logits for every slot of every token: `[B·N·t·d, k]`.
    pub fn decode_full(&self, g: &mut Graph, enc: &Encoded) -> Result<Var> {
        let h = self.decoder_hidden(g, enc)?;
        self.head_logits(g, h)
    }

    /// Logits for the masked tokens only, `[B·M·t·d, k]`, with their
    /// `(batch, token)` coordinates in row order.
    pub fn decode_masked(&self, g: &mut Graph, enc: &Encoded, plans: &[MaskPlan]) -> Result<(Var, Vec<(usize, usize)>)> {
        let n = self.num_tokens();
        let h = self.decoder_hidden(g, enc)?;
        let coords: Vec<(usize, usize)> = plans.iter().enumerate().flat_map(|(b, p)| p.masked_indices().into_iter().map(move |i| (b, i))).collect();
        if coords.is_empty() {
            return Err(Error::Nd(NdError::Empty("no masked tokens: ratio 0 is not trainable".into())));
        }
        let rows: Vec<usize> = coords.iter().map(|&(b, i)| b * n + i).collect();
        let h = g.gather_rows(h, &rows)?;
        Ok((self.head_logits(g, h)?, coords))
    }

    /// One masked-pretraining forward pass over a batch.
    pub fn forward_pretrain(&self, g: &mut Graph, tokens: &[DiscreteTokens], plans: &[MaskPlan]) -> Result<PretrainStep> {
        if tokens.len() != plans.len() {
            return Err(Error::Config(format!("{} token grids but {} mask plans", tokens.len(), plans.len())));
        }
        let x = self.embed_batch(g, tokens)?;
        let enc = self.encode_visible(g, x, plans)?;
        let (logits, coords) = self.decode_masked(g, &enc, plans)?;
        let targets: Vec<usize> = coords.iter().flat_map(|&(b, i)| tokens[b].token(i).iter().copied()).collect();
        let masked_correct = argmax_rows(g.value(logits)).iter().zip(&targets).filter(|(a, b)| a == b).count();
        let loss = g.cross_entropy(logits, &targets, None)?;
        Ok(PretrainStep { loss, encoder_len: enc.seq_len, masked_correct, masked_total: targets.len() })
    }

    /// Full-grid logits for one token grid under `plan`, as a value.
    pub fn predict(&self, tokens: &DiscreteTokens, plan: &MaskPlan) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = self.embed_batch(&mut g, std::slice::from_ref(tokens))?;
        let enc = self.encode_visible(&mut g, x, std::slice::from_ref(plan))?;
        let logits = self.decode_full(&mut g, &enc)?;
        Ok(g.value(logits).clone())
    }
}

/// Mean cross-entropy over the index slots of masked tokens only.
/// `logits [B·N·t·d, k]` from [`Mae::decode_full`].
pub fn pretrain_loss(g: &mut Graph, logits: Var, tokens: &[DiscreteTokens], plans: &[MaskPlan]) -> Result<Var> {
    if tokens.len() != plans.len() {
        return Err(Error::Config(format!("{} token grids but {} mask plans", tokens.len(), plans.len())));
    }
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (x, p) in tokens.iter().zip(plans) {
        if p.num_tokens() != x.geometry.num_tokens() {
            return Err(Error::Config(format!("mask plan covers {} tokens, grid has {}", p.num_tokens(), x.geometry.num_tokens())));
        }
        let w = x.geometry.token_len();
        targets.extend_from_slice(&x.tokens);
        weights.extend(p.masked.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, w)));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::Nd(NdError::Empty("no masked tokens: ratio 0 is not trainable".into())));
    }
    Ok(g.cross_entropy(logits, &targets, Some(&weights))?)
}

/// Row-wise argmax with lowest-index tie-break.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = *t.shape().last().expect("rank ≥ 1");
    t.data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Masked slots take the argmax index, visible slots are copied from `x_q`.
/// `logits` is one grid's `[N·t·d, k]`.
pub fn reconstruct(logits: &Tensor, plan: &MaskPlan, x_q: &DiscreteTokens) -> Result<QuantizedGrid> {
    let w = x_q.geometry.token_len();
    if logits.rank() != 2 || logits.shape()[0] != x_q.tokens.len() || plan.num_tokens() != x_q.geometry.num_tokens() {
        return Err(Error::Config(format!(
            "logits {:?} and plan over {} tokens do not match {} index slots",
            logits.shape(),
            plan.num_tokens(),
            x_q.tokens.len()
        )));
    }
    let pred = argmax_rows(logits);
    let mut out = x_q.clone();
    for i in plan.masked_indices() {
        out.tokens[i * w..(i + 1) * w].copy_from_slice(&pred[i * w..(i + 1) * w]);
    }
    Ok(crate::tokens::unpatchify(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndauto::grad_check;
    use crate::tokens::{make_mask, MaskStrategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini_cfg() -> MaeConfig {
        // 4 frames × 4 positions, 1×2 tokens → N = 8, width 2·8 = 16
        MaeConfig { t: 1, d: 2, frames: 4, width: 4, code_dim: 8, codes: 5, depth: 2, decoder_depth: 1, ..MaeConfig::default() }
    }

    fn table(rng: &mut ChaCha8Rng, k: usize, e: usize) -> EmbeddingTable {
        EmbeddingTable { codes: Tensor::from_fn(&[k, e], |_| rng.gen_range(-1.0..1.0)), trainable: true }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, cfg: &MaeConfig) -> DiscreteTokens {
        let geometry = cfg.geometry().unwrap();
        DiscreteTokens { geometry, tokens: (0..geometry.num_tokens() * geometry.token_len()).map(|_| rng.gen_range(0..cfg.codes)).collect() }
    }

    fn model(cfg: MaeConfig, seed: u64) -> (Mae, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = table(&mut rng, cfg.codes, cfg.code_dim);
        (Mae::new(cfg, &t, &mut rng).unwrap(), rng)
    }

    fn randomize_biases(m: &mut Mae, rng: &mut ChaCha8Rng) {
        for p in m.store.params_mut() {
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
    }

    #[test]
    fn sequence_lengths_follow_visible_count() {
        let cfg = MaeConfig { depth: 2, decoder_depth: 1, code_dim: 4, ..MaeConfig::default() };
        let (m, mut rng) = model(cfg.clone(), 1);
        let x = random_tokens(&mut rng, &cfg);
        let geo = cfg.geometry().unwrap();
        for (ratio, want) in [(0.8, 33), (0.0, 161)] {
            let plan = make_mask(&geo, MaskStrategy::PatchTf, ratio, 3).unwrap();
            let mut g = Graph::new();
            let e = m.embed_batch(&mut g, std::slice::from_ref(&x)).unwrap();
            let enc = m.encode_visible(&mut g, e, std::slice::from_ref(&plan)).unwrap();
            assert_eq!(enc.seq_len, want);
            assert_eq!(g.shape(enc.latent), &[want, 160]);
            let logits = m.decode_full(&mut g, &enc).unwrap();
            assert_eq!(g.shape(logits), &[160 * 40, 256]);
            assert!(g.value(logits).is_finite());
        }
    }

    #[test]
    fn plan_mismatch_is_rejected() {
        let cfg = mini_cfg();
        let (m, mut rng) = model(cfg.clone(), 2);
        let x = random_tokens(&mut rng, &cfg);
        let mut g = Graph::new();
        let e = m.embed_batch(&mut g, std::slice::from_ref(&x)).unwrap();
        assert!(m.encode_visible(&mut g, e, &[MaskPlan::none(7)]).is_err());
        let bad = MaeConfig { depth: 1, decoder_depth: 1, ..mini_cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn masked_embeddings_never_reach_the_encoder() {
        let cfg = mini_cfg();
        let (m, mut rng) = model(cfg.clone(), 3);
        let x = random_tokens(&mut rng, &cfg);
        let plan = make_mask(&cfg.geometry().unwrap(), MaskStrategy::PatchTf, 0.5, 9).unwrap();
        let run = |tweak: bool| {
            let mut g = Graph::new();
            let e = m.embed_batch(&mut g, std::slice::from_ref(&x)).unwrap();
            let mut val = g.value(e).clone();
            if tweak {
                for i in plan.masked_indices() {
                    val.data_mut()[i * 16..(i + 1) * 16].iter_mut().for_each(|v| *v += 3.7);
                }
            }
            let e = g.input(val).unwrap();
            let enc = m.encode_visible(&mut g, e, std::slice::from_ref(&plan)).unwrap();
            g.value(enc.latent).clone()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn visible_logits_carry_no_loss_or_gradient() {
        let cfg = mini_cfg();
        let (m, mut rng) = model(cfg.clone(), 4);
        let x = random_tokens(&mut rng, &cfg);
        let plan = make_mask(&cfg.geometry().unwrap(), MaskStrategy::PatchTf, 0.5, 1).unwrap();
        let mut g = Graph::new();
        let e = m.embed_batch(&mut g, std::slice::from_ref(&x)).unwrap();
        let enc = m.encode_visible(&mut g, e, std::slice::from_ref(&plan)).unwrap();
        let logits = m.decode_full(&mut g, &enc).unwrap();
        let mut val = g.value(logits).clone();
        let lv = g.input(val.clone()).unwrap();
        let base = pretrain_loss(&mut g, lv, std::slice::from_ref(&x), std::slice::from_ref(&plan)).unwrap();
        let grads = g.backward(base).unwrap();
        let grad = grads.wrt(lv).unwrap().to_vec();
        let k = cfg.codes;
        for i in plan.visible_indices() {
            for s in 0..2 {
                let row = (i * 2 + s) * k;
                assert!(grad[row..row + k].iter().all(|&v| v == 0.0));
                val.data_mut()[row..row + k].iter_mut().for_each(|v| *v = rng.gen_range(-50.0..50.0));
            }
        }
        let lv2 = g.input(val).unwrap();
        let other = pretrain_loss(&mut g, lv2, std::slice::from_ref(&x), std::slice::from_ref(&plan)).unwrap();
        assert_eq!(g.value(base).item(), g.value(other).item());
        let grads2 = g.backward(other).unwrap();
        assert_eq!(grads2.wrt(lv2).unwrap(), &grad[..]);
    }

    #[test]
    fn uniform_logits_give_ln_k_and_empty_mask_is_an_error() {
        let cfg = MaeConfig { codes: 256, ..mini_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tokens(&mut rng, &cfg);
        let plan = make_mask(&cfg.geometry().unwrap(), MaskStrategy::PatchTf, 0.5, 1).unwrap();
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[16, 256])).unwrap();
        let loss = pretrain_loss(&mut g, l, std::slice::from_ref(&x), std::slice::from_ref(&plan)).unwrap();
        assert!((g.value(loss).item() - 256f64.ln()).abs() < 1e-9);
        assert!(pretrain_loss(&mut g, l, std::slice::from_ref(&x), &[MaskPlan::none(8)]).is_err());
    }

    #[test]
    fn masked_path_agrees_with_full_decode() {
        let cfg = mini_cfg();
        let (m, mut rng) = model(cfg.clone(), 6);
        let xs = vec![random_tokens(&mut rng, &cfg), random_tokens(&mut rng, &cfg)];
        let geo = cfg.geometry().unwrap();
        let plans: Vec<_> = (0..2).map(|s| make_mask(&geo, MaskStrategy::PatchTf, 0.6, s).unwrap()).collect();
        let mut g = Graph::new();
        let step = m.forward_pretrain(&mut g, &xs, &plans).unwrap();
        let e = m.embed_batch(&mut g, &xs).unwrap();
        let enc = m.encode_visible(&mut g, e, &plans).unwrap();
        let logits = m.decode_full(&mut g, &enc).unwrap();
        let full = pretrain_loss(&mut g, logits, &xs, &plans).unwrap();
        assert!((g.value(step.loss).item() - g.value(full).item()).abs() < 1e-12);
        assert_eq!(step.masked_total, 2 * 5 * 2);
    }

    #[test]
    fn permuting_tokens_with_positions_permutes_logits() {
        let cfg = mini_cfg();
        let (mut m, mut rng) = model(cfg.clone(), 7);
        let x = random_tokens(&mut rng, &cfg);
        let geo = cfg.geometry().unwrap();
        let plan = make_mask(&geo, MaskStrategy::PatchTf, 0.5, 2).unwrap();
        let base = m.predict(&x, &plan).unwrap();
        let perm = [3, 0, 6, 1, 7, 2, 5, 4]; // new position p holds old token perm[p]
        let mut px = x.clone();
        let mut pplan = plan.clone();
        for (p, &o) in perm.iter().enumerate() {
            px.tokens[p * 2..p * 2 + 2].copy_from_slice(x.token(o));
            pplan.masked[p] = plan.masked[o];
        }
        for name in ["enc.pos", "dec.pos"] {
            let id = m.store.id(name).unwrap();
            let old = m.store.value(id).clone();
            let v = &mut m.store.get_mut(id).value;
            for (p, &o) in perm.iter().enumerate() {
                v.data_mut()[p * 16..(p + 1) * 16].copy_from_slice(old.row(o));
            }
        }
        let out = m.predict(&px, &pplan).unwrap();
        for (p, &o) in perm.iter().enumerate() {
            for s in 0..2 {
                let (a, b) = (out.row(p * 2 + s), base.row(o * 2 + s));
                assert!(a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-10));
            }
        }
    }

    #[test]
    fn untrained_loss_is_near_ln_256() {
        let cfg = MaeConfig { code_dim: 4, depth: 2, decoder_depth: 1, ..MaeConfig::default() };
        let (m, mut rng) = model(cfg.clone(), 8);
        let x = random_tokens(&mut rng, &cfg);
        let plan = make_mask(&cfg.geometry().unwrap(), MaskStrategy::PatchTf, 0.8, 4).unwrap();
        let mut g = Graph::new();
        let step = m.forward_pretrain(&mut g, std::slice::from_ref(&x), std::slice::from_ref(&plan)).unwrap();
        let loss = g.value(step.loss).item();
        assert!((loss / 256f64.ln() - 1.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn reconstruction_copies_visible_and_argmaxes_masked() {
        let cfg = mini_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tokens(&mut rng, &cfg);
        let noise = Tensor::from_fn(&[16, 5], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(reconstruct(&noise, &MaskPlan::none(8), &x).unwrap(), crate::tokens::unpatchify(&x));
        let onehot = Tensor::from_fn(&[16, 5], |i| if x.tokens[i / 5] == i % 5 { 1.0 } else { 0.0 });
        let all = MaskPlan { masked: vec![true; 8], ..MaskPlan::none(8) };
        assert_eq!(reconstruct(&onehot, &all, &x).unwrap(), crate::tokens::unpatchify(&x));
    }

    #[test]
    fn mini_model_passes_gradcheck() {
        let cfg = mini_cfg();
        let (mut m, mut rng) = model(cfg.clone(), 10);
        randomize_biases(&mut m, &mut rng);
        let xs = vec![random_tokens(&mut rng, &cfg)];
        let plans = vec![make_mask(&cfg.geometry().unwrap(), MaskStrategy::PatchTf, 0.5, 3).unwrap()];
        let net = m.clone();
        let report = grad_check(
            &mut m.store,
            |g, s| {
                let mut local = net.clone();
                local.store = s.clone();
                let e = local.embed_batch(g, &xs).map_err(to_nd)?;
                let enc = local.encode_visible(g, e, &plans).map_err(to_nd)?;
                let logits = local.decode_full(g, &enc).map_err(to_nd)?;
                pretrain_loss(g, logits, &xs, &plans).map_err(to_nd)
            },
            1e-5,
            1e-3,
            24,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    fn to_nd(e: Error) -> NdError {
        match e {
            Error::Nd(e) => e,
            other => NdError::Shape(other.to_string()),
        }
    }
}
