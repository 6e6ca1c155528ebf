//! Discrete index tokens, mask plans and continuous embeddings.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndauto::{Graph, NdError, Tensor, Var};
use crate::vqvae::{Codebook, QuantizedGrid};

/// Patch layout over a `frames × width` quantized grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    /// Frames per token.
    pub t: usize,
    /// Latent-frequency positions per token.
    pub d: usize,
    pub n_t: usize,
    pub n_d: usize,
    /// Latent width `D′` of the source grid.
    pub width: usize,
}

impl TokenGeometry {
    /// Geometry for a grid of `frames × width`; trailing frames that do not
    /// fill a whole token are dropped.
    pub fn new(frames: usize, width: usize, t: usize, d: usize) -> Result<Self> {
        if t == 0 || d == 0 {
            return Err(Error::Config(format!("token size must be positive, got t={t}, d={d}")));
        }
        if !width.is_multiple_of(d) {
            return Err(Error::Config(format!("d={d} does not divide the latent width {width}")));
        }
        if frames < t {
            return Err(Error::Config(format!("{frames} frames cannot hold a token of t={t} frames")));
        }
        Ok(TokenGeometry { t, d, n_t: frames / t, n_d: width / d, width })
    }

    pub fn num_tokens(&self) -> usize {
        self.n_t * self.n_d
    }

    /// Indices per discrete token, `t·d`.
    pub fn token_len(&self) -> usize {
        self.t * self.d
    }

    /// Width of a continuous embedding token, `t·d·e`.
    pub fn embed_width(&self, code_dim: usize) -> usize {
        self.t * self.d * code_dim
    }

    /// Frames covered by the token grid.
    pub fn frames(&self) -> usize {
        self.n_t * self.t
    }

    pub fn is_frame_geometry(&self) -> bool {
        self.t == 1 && self.d == self.width
    }
}

/// `N × (t·d)` integer matrix of patched codebook indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscreteTokens {
    pub geometry: TokenGeometry,
    pub tokens: Vec<usize>,
}

impl DiscreteTokens {
    pub fn token(&self, n: usize) -> &[usize] {
        let w = self.geometry.token_len();
        &self.tokens[n * w..(n + 1) * w]
    }
}

/// Splits `grid` into non-overlapping `t × d` patches. Token `(i, j)` has
/// index `i·n_d + j` and lists its entries time-major.
pub fn patchify(grid: &QuantizedGrid, t: usize, d: usize) -> Result<DiscreteTokens> {
    let geometry = TokenGeometry::new(grid.n_frames, grid.width, t, d)?;
    let mut tokens = Vec::with_capacity(geometry.num_tokens() * t * d);
    for i in 0..geometry.n_t {
        for j in 0..geometry.n_d {
            for f in 0..t {
                let row = grid.frame(i * t + f);
                tokens.extend_from_slice(&row[j * d..(j + 1) * d]);
            }
        }
    }
    Ok(DiscreteTokens { geometry, tokens })
}

/// Inverse of [`patchify`] over the covered frames.
pub fn unpatchify(tokens: &DiscreteTokens) -> QuantizedGrid {
    let g = tokens.geometry;
    let mut indices = vec![0; g.frames() * g.width];
    for i in 0..g.n_t {
        for j in 0..g.n_d {
            let tok = tokens.token(i * g.n_d + j);
            for f in 0..g.t {
                let row = (i * g.t + f) * g.width + j * g.d;
                indices[row..row + g.d].copy_from_slice(&tok[f * g.d..(f + 1) * g.d]);
            }
        }
    }
    QuantizedGrid::new(g.frames(), g.width, indices)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    /// Uniformly random tokens over the time-frequency grid.
    PatchTf,
    /// Whole time columns of tokens.
    PatchT,
    /// Whole frequency rows of tokens.
    PatchF,
    /// Whole frames; requires one token per frame (`t = 1`, `d = D′`).
    Frame,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [MaskStrategy::PatchTf, MaskStrategy::PatchT, MaskStrategy::PatchF, MaskStrategy::Frame];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::PatchTf => "patch-tf",
            MaskStrategy::PatchT => "patch-t",
            MaskStrategy::PatchF => "patch-f",
            MaskStrategy::Frame => "frame",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown masking strategy {s:?} (expected patch-tf, patch-t, patch-f or frame)")))
    }
}

/// Half-away-from-zero rounding of `ratio · units`.
pub fn mask_units(ratio: f64, units: usize) -> usize {
    (ratio * units as f64).round() as usize
}

/// Closed-form number of masked tokens.
pub fn expected_masked(geometry: &TokenGeometry, strategy: MaskStrategy, ratio: f64) -> usize {
    match strategy {
        MaskStrategy::PatchTf | MaskStrategy::Frame => mask_units(ratio, geometry.num_tokens()),
        MaskStrategy::PatchT => mask_units(ratio, geometry.n_t) * geometry.n_d,
        MaskStrategy::PatchF => mask_units(ratio, geometry.n_d) * geometry.n_t,
    }
}

/// The masked set `Ω_M` for one token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub seed: u64,
    pub masked: Vec<bool>,
}

impl MaskPlan {
    /// A plan with nothing masked (inspection mode).
    pub fn none(num_tokens: usize) -> Self {
        MaskPlan { strategy: MaskStrategy::PatchTf, ratio: 0.0, seed: 0, masked: vec![false; num_tokens] }
    }

    pub fn num_tokens(&self) -> usize {
        self.masked.len()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// One line per time block, `#` masked and `.` visible.
    pub fn render_text(&self, geometry: &TokenGeometry) -> String {
        let mut out = String::with_capacity(self.masked.len() + geometry.n_t);
        for i in 0..geometry.n_t {
            for j in 0..geometry.n_d {
                out.push(if self.masked[i * geometry.n_d + j] { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// Draws `Ω_M` for `strategy` at `ratio`; a deterministic function of its inputs.
pub fn make_mask(geometry: &TokenGeometry, strategy: MaskStrategy, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("masking ratio must lie in [0, 1), got {ratio}")));
    }
    if strategy == MaskStrategy::Frame && !geometry.is_frame_geometry() {
        return Err(Error::Config(format!("frame masking needs one token per frame (t=1, d={}), got t={}, d={}", geometry.width, geometry.t, geometry.d)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_t, n_d) = (geometry.n_t, geometry.n_d);
    let mut masked = vec![false; geometry.num_tokens()];
    match strategy {
        MaskStrategy::PatchTf | MaskStrategy::Frame => {
            let n = geometry.num_tokens();
            for i in sample(&mut rng, n, mask_units(ratio, n)) {
                masked[i] = true;
            }
        }
        MaskStrategy::PatchT => {
            for i in sample(&mut rng, n_t, mask_units(ratio, n_t)) {
                masked[i * n_d..(i + 1) * n_d].iter_mut().for_each(|m| *m = true);
            }
        }
        MaskStrategy::PatchF => {
            for j in sample(&mut rng, n_d, mask_units(ratio, n_d)) {
                for i in 0..n_t {
                    masked[i * n_d + j] = true;
                }
            }
        }
    }
    Ok(MaskPlan { strategy, ratio, seed, masked })
}

/// SplitMix64 finalizer; mixes a master seed with stream coordinates.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `k × e` embedding table, initialized from the VQ-VAE codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub codes: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn from_codebook(cb: &Codebook, trainable: bool) -> Self {
        EmbeddingTable { codes: cb.codes.clone(), trainable }
    }

    pub fn codes_len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn code_dim(&self) -> usize {
        self.codes.shape()[1]
    }
}

fn check_indices(tokens: &DiscreteTokens, k: usize) -> Result<()> {
    match tokens.tokens.iter().find(|&&i| i >= k) {
        Some(&bad) => Err(Error::Nd(NdError::Index { index: bad, bound: k })),
        None => Ok(()),
    }
}

/// Replaces every index by its code vector: `N × (t·d·e)` on the graph.
/// `table` is the `k × e` table variable.
pub fn embed(g: &mut Graph, table: Var, tokens: &DiscreteTokens) -> Result<Var> {
    let (k, e) = (g.shape(table)[0], g.shape(table)[1]);
    check_indices(tokens, k)?;
    let rows = g.gather_rows(table, &tokens.tokens)?;
    let geo = tokens.geometry;
    Ok(g.reshape(rows, &[geo.num_tokens(), geo.embed_width(e)])?)
}

/// Value-only counterpart of [`embed`].
pub fn embed_values(tokens: &DiscreteTokens, table: &EmbeddingTable) -> Result<Tensor> {
    check_indices(tokens, table.codes_len())?;
    let geo = tokens.geometry;
    let mut out = Vec::with_capacity(tokens.tokens.len() * table.code_dim());
    for &i in &tokens.tokens {
        out.extend_from_slice(table.codes.row(i));
    }
    Ok(Tensor::new(&[geo.num_tokens(), geo.embed_width(table.code_dim())], out)?)
}
