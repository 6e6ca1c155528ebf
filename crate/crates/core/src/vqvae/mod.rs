//! Frame-wise, frequency-convolutional VQ-VAE.
//!
//! Each spectrogram frame is treated as a one-channel signal along the
//! frequency axis. Frames are reflect-padded 513 → 520 so that three
//! stride-2, kernel-4 convolutions (paddings 0, 0, 1) land on exactly 64
//! positions; the decoder mirrors them with transposed convolutions
//! (64 → 128 → 258 → 518) and crops back to 513 bins. Frames never interact,
//! so the latent grid keeps the time axis of the input.

mod codebook;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use codebook::{usage_entropy, Codebook, QuantizedGrid};

use crate::dsp::PowerSpectrogram;
use crate::error::{Error, Result};
use crate::ndauto::{xavier_uniform, Graph, NdError, ParamId, ParamStore, Tensor, Var};

/// Frames per forward chunk during inference.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct VqVaeConfig {
    pub n_bins: usize,
    pub channels1: usize,
    pub channels2: usize,
    /// Number of codes `k`.
    pub codes: usize,
    /// Code dimension `e`.
    pub code_dim: usize,
    pub beta: f64,
    /// Train on `log1p(power)` and decode through `expm1`.
    pub log_compress: bool,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        VqVaeConfig { n_bins: 513, channels1: 32, channels2: 64, codes: 256, code_dim: 8, beta: 0.25, log_compress: true }
    }
}

impl VqVaeConfig {
    pub const PAD_LEFT: usize = 3;
    pub const PAD_RIGHT: usize = 4;
    pub const LATENT_POSITIONS: usize = 64;

    pub fn padded_bins(&self) -> usize {
        self.n_bins + Self::PAD_LEFT + Self::PAD_RIGHT
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins != 513 {
            return Err(Error::Config(format!("vqvae expects 513 frequency bins (fft 1024), got {}", self.n_bins)));
        }
        if self.channels1 == 0 || self.channels2 < 2 || self.codes < 2 || self.code_dim == 0 {
            return Err(Error::Config("vqvae channel widths, codes and code_dim must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("vqvae beta must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, kernel: usize, c_in: usize, c_out: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(&format!("{name}.weight"), xavier_uniform(rng, kernel * c_in, kernel * c_out, &[kernel, c_in, c_out]), true);
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]), false);
        Conv { w, b, stride, pad }
    }

    fn new_transposed(store: &mut ParamStore, name: &str, kernel: usize, c_in: usize, c_out: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(&format!("{name}.weight"), xavier_uniform(rng, kernel * c_in, kernel * c_out, &[c_in, kernel, c_out]), true);
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]), false);
        Conv { w, b, stride, pad }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NdError> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv1d(x, w, b, self.stride, self.pad)
    }

    fn forward_transposed(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NdError> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv_transpose1d(x, w, b, self.stride, self.pad)
    }
}

/// `x + conv1x1(relu(conv3(relu(x))))`
#[derive(Clone, Debug)]
struct Residual {
    conv_a: Conv,
    conv_b: Conv,
}

impl Residual {
    fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / 2).max(1);
        Residual {
            conv_a: Conv::new(store, &format!("{name}.a"), 3, channels, hidden, 1, 1, rng),
            conv_b: Conv::new(store, &format!("{name}.b"), 1, hidden, channels, 1, 0, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NdError> {
        let h = g.relu(x);
        let h = self.conv_a.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.conv_b.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Tape values of one training forward pass.
pub struct VqForward {
    pub loss: Var,
    pub recon_loss: f64,
    pub indices: Vec<usize>,
    /// Encoder outputs `[B·64, e]`, used to reseed dead codes.
    pub z_e: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VqVae {
    pub cfg: VqVaeConfig,
    pub store: ParamStore,
    pub codebook: ParamId,
    pub usage_counts: Vec<u64>,
    enc1: Conv,
    enc2: Conv,
    enc_res: Residual,
    enc3: Conv,
    dec1: Conv,
    dec_res: Residual,
    dec2: Conv,
    dec3: Conv,
}

/// Reconstruction MSE + codebook term + `beta` × commitment term.
///
/// `z_q` must be the codebook gather (gradient flows to the codebook only
/// through the second term); `z_e` receives the commitment gradient.
pub fn vqvae_loss(g: &mut Graph, x: Var, x_rec: Var, z_e: Var, z_q: Var, beta: f64) -> Result<Var, NdError> {
    let d = g.sub(x_rec, x)?;
    let d2 = g.mul(d, d)?;
    let recon = g.mean(d2);
    let ze_sg = g.detach(z_e);
    let d = g.sub(ze_sg, z_q)?;
    let d2 = g.mul(d, d)?;
    let codebook = g.mean(d2);
    let zq_sg = g.detach(z_q);
    let d = g.sub(z_e, zq_sg)?;
    let d2 = g.mul(d, d)?;
    let commit = g.mean(d2);
    let commit = g.scale(commit, beta);
    let s = g.add(recon, codebook)?;
    g.add(s, commit)
}

impl VqVae {
    pub fn new(cfg: VqVaeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c1, c2, e, k) = (cfg.channels1, cfg.channels2, cfg.code_dim, cfg.codes);
        let mut store = ParamStore::new();
        let enc1 = Conv::new(&mut store, "enc.conv1", 4, 1, c1, 2, 0, rng);
        let enc2 = Conv::new(&mut store, "enc.conv2", 4, c1, c2, 2, 0, rng);
        let enc_res = Residual::new(&mut store, "enc.res", c2, rng);
        let enc3 = Conv::new(&mut store, "enc.conv3", 4, c2, e, 2, 1, rng);
        let dec1 = Conv::new_transposed(&mut store, "dec.deconv1", 4, e, c2, 2, 1, rng);
        let dec_res = Residual::new(&mut store, "dec.res", c2, rng);
        let dec2 = Conv::new_transposed(&mut store, "dec.deconv2", 4, c2, c1, 2, 0, rng);
        let dec3 = Conv::new_transposed(&mut store, "dec.deconv3", 4, c1, 1, 2, 0, rng);
        let bound = 1.0 / k as f64;
        let codes = Tensor::from_fn(&[k, e], |_| rng.gen_range(-bound..bound));
        let codebook = store.add("codebook", codes, false);
        Ok(VqVae { cfg, store, codebook, usage_counts: vec![0; k], enc1, enc2, enc_res, enc3, dec1, dec_res, dec2, dec3 })
    }

    pub fn codebook(&self) -> Codebook {
        Codebook { codes: self.store.value(self.codebook).clone(), usage_counts: self.usage_counts.clone() }
    }

    /// Input-domain transform applied before the encoder.
    pub fn compress(&self, power: f64) -> f64 {
        if self.cfg.log_compress {
            power.max(0.0).ln_1p()
        } else {
            power
        }
    }

    pub fn decompress(&self, v: f64) -> f64 {
        if self.cfg.log_compress {
            v.exp_m1().max(0.0)
        } else {
            v.max(0.0)
        }
    }

    /// Compressed, reflect-padded frames as `[B, 520, 1]`.
    pub fn prepare_frames(&self, frames: &[f64]) -> Result<Tensor> {
        let n = self.cfg.n_bins;
        if !frames.len().is_multiple_of(n) {
            return Err(Error::Data(format!("frame data length {} is not a multiple of {n}", frames.len())));
        }
        let b = frames.len() / n;
        let padded = self.cfg.padded_bins();
        let mut out = Vec::with_capacity(b * padded);
        for f in frames.chunks_exact(n) {
            let c: Vec<f64> = f.iter().map(|&p| self.compress(p)).collect();
            out.extend(reflect_pad(&c, VqVaeConfig::PAD_LEFT, VqVaeConfig::PAD_RIGHT));
        }
        Ok(Tensor::new(&[b, padded, 1], out)?)
    }

    /// Padded input `[B, 520, 1]` → `z_e [B, 64, e]`.
    pub fn encoder_forward(&self, g: &mut Graph, x: Var) -> Result<Var, NdError> {
        let s = &self.store;
        let h = self.enc1.forward(g, s, x)?;
        let h = g.relu(h);
        let h = self.enc2.forward(g, s, h)?;
        let h = g.relu(h);
        let h = self.enc_res.forward(g, s, h)?;
        let h = g.relu(h);
        self.enc3.forward(g, s, h)
    }

    /// `z_q [B, 64, e]` → compressed reconstruction `[B, 513]`.
    pub fn decoder_forward(&self, g: &mut Graph, z: Var) -> Result<Var, NdError> {
        let s = &self.store;
        let h = self.dec1.forward_transposed(g, s, z)?;
        let h = self.dec_res.forward(g, s, h)?;
        let h = g.relu(h);
        let h = self.dec2.forward_transposed(g, s, h)?;
        let h = g.relu(h);
        let h = self.dec3.forward_transposed(g, s, h)?;
        let h = g.narrow(h, 1, VqVaeConfig::PAD_LEFT, self.cfg.n_bins)?;
        let b = g.shape(h)[0];
        g.reshape(h, &[b, self.cfg.n_bins])
    }

    /// Builds the training graph for a batch of raw power frames (`B × 513`).
    pub fn forward_train(&self, g: &mut Graph, frames: &[f64]) -> Result<VqForward> {
        let x_in = self.prepare_frames(frames)?;
        let b = x_in.shape()[0];
        let target: Vec<f64> = frames.iter().map(|&p| self.compress(p)).collect();
        let target = g.constant(Tensor::new(&[b, self.cfg.n_bins], target)?)?;
        let x = g.constant(x_in)?;
        let z_e = self.encoder_forward(g, x)?;
        let (e, positions) = (self.cfg.code_dim, VqVaeConfig::LATENT_POSITIONS);
        let z_e = g.reshape(z_e, &[b * positions, e])?;
        let z_e_vals = g.value(z_e).data().to_vec();
        let cb = self.codebook();
        let indices = cb.quantize(&z_e_vals);
        let cb_var = g.param(&self.store, self.codebook);
        let z_q = g.gather_rows(cb_var, &indices)?;
        let st_value = g.value(z_q).clone();
        let z_st = g.straight_through(z_e, st_value)?;
        let z_st = g.reshape(z_st, &[b, positions, e])?;
        let x_rec = self.decoder_forward(g, z_st)?;
        let loss = vqvae_loss(g, target, x_rec, z_e, z_q, self.cfg.beta)?;
        let recon_loss = {
            let a = g.value(x_rec).data();
            let t = g.value(target).data();
            a.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        Ok(VqForward { loss, recon_loss, indices, z_e: z_e_vals })
    }

    /// Reconstruction MSE with the quantizer bypassed (`z_q := z_e`). This is
    /// the function whose gradient the straight-through estimator follows,
    /// so it is what finite-difference checks of the stack verify.
    pub fn forward_continuous(&self, g: &mut Graph, frames: &[f64]) -> Result<Var> {
        let x_in = self.prepare_frames(frames)?;
        let b = x_in.shape()[0];
        let target: Vec<f64> = frames.iter().map(|&p| self.compress(p)).collect();
        let target = g.constant(Tensor::new(&[b, self.cfg.n_bins], target)?)?;
        let x = g.constant(x_in)?;
        let z_e = self.encoder_forward(g, x)?;
        let x_rec = self.decoder_forward(g, z_e)?;
        let d = g.sub(x_rec, target)?;
        let d2 = g.mul(d, d)?;
        Ok(g.mean(d2))
    }

    /// Latent field `z_e` as a `[T, 64, e]` tensor.
    pub fn encode(&self, spec: &PowerSpectrogram) -> Result<Tensor> {
        if spec.n_bins != self.cfg.n_bins {
            return Err(Error::Nd(NdError::Shape(format!("spectrogram has {} bins, vqvae expects {}", spec.n_bins, self.cfg.n_bins))));
        }
        let (positions, e) = (VqVaeConfig::LATENT_POSITIONS, self.cfg.code_dim);
        let mut out = Vec::with_capacity(spec.n_frames * positions * e);
        for chunk in spec.data.chunks(CHUNK * spec.n_bins) {
            let mut g = Graph::new();
            let x = g.constant(self.prepare_frames(chunk)?)?;
            let z = self.encoder_forward(&mut g, x)?;
            out.extend_from_slice(g.value(z).data());
        }
        Ok(Tensor::new(&[spec.n_frames, positions, e], out)?)
    }

    /// Nearest-code indices and selected code vectors for a `[T, 64, e]` field.
    pub fn quantize(&self, z_e: &Tensor) -> Result<(QuantizedGrid, Tensor)> {
        let e = self.cfg.code_dim;
        if z_e.rank() != 3 || z_e.shape()[2] != e {
            return Err(Error::Nd(NdError::Shape(format!("z_e shape {:?} does not end with code dim {e}", z_e.shape()))));
        }
        let cb = self.codebook();
        let indices = cb.quantize(z_e.data());
        let z_q = Tensor::new(z_e.shape(), cb.lookup(&indices))?;
        Ok((QuantizedGrid::new(z_e.shape()[0], z_e.shape()[1], indices), z_q))
    }

    pub fn tokenize(&self, spec: &PowerSpectrogram) -> Result<QuantizedGrid> {
        let z = self.encode(spec)?;
        Ok(self.quantize(&z)?.0)
    }

    /// Decodes `z_q [T, 64, e]` back to a nonnegative power spectrogram.
    pub fn decode(&self, z_q: &Tensor) -> Result<PowerSpectrogram> {
        let (positions, e) = (VqVaeConfig::LATENT_POSITIONS, self.cfg.code_dim);
        if z_q.rank() != 3 || z_q.shape()[1] != positions || z_q.shape()[2] != e {
            return Err(Error::Nd(NdError::Shape(format!("decode expects [T, {positions}, {e}], got {:?}", z_q.shape()))));
        }
        let t = z_q.shape()[0];
        let mut data = Vec::with_capacity(t * self.cfg.n_bins);
        for chunk in z_q.data().chunks(CHUNK * positions * e) {
            let rows = chunk.len() / (positions * e);
            let mut g = Graph::new();
            let z = g.constant(Tensor::new(&[rows, positions, e], chunk.to_vec())?)?;
            let y = self.decoder_forward(&mut g, z)?;
            data.extend(g.value(y).data().iter().map(|&v| self.decompress(v)));
        }
        Ok(PowerSpectrogram { n_frames: t, n_bins: self.cfg.n_bins, hop: 0, data })
    }

    pub fn decode_indices(&self, grid: &QuantizedGrid) -> Result<PowerSpectrogram> {
        let cb = self.codebook();
        let z = Tensor::new(&[grid.n_frames, grid.width, self.cfg.code_dim], cb.lookup(&grid.indices))?;
        self.decode(&z)
    }

    /// Re-seeds every code whose usage counter is zero with a jittered vector
    /// drawn from `pool` (consecutive encoder outputs). Returns how many codes
    /// were replaced.
    pub fn reseed_dead_codes(&mut self, pool: &[f64], rng: &mut impl Rng) -> usize {
        let dead: Vec<usize> = (0..self.cfg.codes).filter(|&j| self.usage_counts[j] == 0).collect();
        self.reseed_codes(&dead, pool, rng)
    }

    /// Overwrites the whole codebook with encoder outputs from `pool`, so
    /// training starts with every code inside the data's range.
    pub fn init_codebook_from(&mut self, pool: &[f64], rng: &mut impl Rng) -> usize {
        let all: Vec<usize> = (0..self.cfg.codes).collect();
        self.reseed_codes(&all, pool, rng)
    }

    fn reseed_codes(&mut self, which: &[usize], pool: &[f64], rng: &mut impl Rng) -> usize {
        let e = self.cfg.code_dim;
        let candidates: Vec<&[f64]> = pool.chunks_exact(e).collect();
        if candidates.is_empty() {
            return 0;
        }
        let spread = {
            let n = pool.len() as f64;
            let mean = pool.iter().sum::<f64>() / n;
            (pool.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-6)
        };
        let jitter = Normal::new(0.0, 1e-2 * spread).expect("finite");
        let codes = &mut self.store.get_mut(self.codebook).value;
        for &j in which {
            let src = candidates.choose(rng).expect("nonempty");
            for (c, s) in codes.data_mut()[j * e..(j + 1) * e].iter_mut().zip(src.iter()) {
                *c = s + jitter.sample(rng);
            }
        }
        which.len()
    }
}

fn reflect_pad(x: &[f64], left: usize, right: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + left + right);
    out.extend((1..=left).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=right).map(|i| x[n - 1 - i]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndauto::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> VqVaeConfig {
        VqVaeConfig { channels1: 4, channels2: 6, codes: 16, code_dim: 8, ..Default::default() }
    }

    fn random_spec(rng: &mut ChaCha8Rng, frames: usize) -> PowerSpectrogram {
        let data = (0..frames * 513).map(|_| rng.gen_range(0.0..50.0f64).powi(2)).collect();
        PowerSpectrogram { n_frames: frames, n_bins: 513, hop: 307, data }
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(reflect_pad(&[0.0, 1.0, 2.0, 3.0, 4.0], 2, 3), vec![2.0, 1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn encode_decode_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vq = VqVae::new(VqVaeConfig::default(), &mut rng).unwrap();
        let spec = random_spec(&mut rng, 7);
        let z = vq.encode(&spec).unwrap();
        assert_eq!(z.shape(), &[7, 64, 8]);
        let (grid, zq) = vq.quantize(&z).unwrap();
        assert_eq!((grid.n_frames, grid.width), (7, 64));
        assert!(grid.indices.iter().all(|&i| i < 256));
        let rec = vq.decode(&zq).unwrap();
        assert_eq!((rec.n_frames, rec.n_bins), (7, 513));
        assert!(rec.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn frames_are_processed_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vq = VqVae::new(small_cfg(), &mut rng).unwrap();
        let spec = random_spec(&mut rng, 4);
        let z = vq.encode(&spec).unwrap();
        let row = 64 * 8;
        // identical frames → identical rows
        let mut dup = spec.clone();
        dup.data.copy_within(0..513, 513);
        let zd = vq.encode(&dup).unwrap();
        assert_eq!(&zd.data()[..row], &zd.data()[row..2 * row]);
        // permuting frames permutes latent rows
        let order = [2, 0, 3, 1];
        let mut perm = spec.clone();
        for (dst, &src) in order.iter().enumerate() {
            perm.data[dst * 513..(dst + 1) * 513].copy_from_slice(spec.frame(src));
        }
        let zp = vq.encode(&perm).unwrap();
        for (dst, &src) in order.iter().enumerate() {
            assert_eq!(&zp.data()[dst * row..(dst + 1) * row], &z.data()[src * row..(src + 1) * row]);
        }
        // decoding frames one at a time equals joint decode
        let (_, zq) = vq.quantize(&z).unwrap();
        let joint = vq.decode(&zq).unwrap();
        for t in 0..4 {
            let single = Tensor::new(&[1, 64, 8], zq.data()[t * row..(t + 1) * row].to_vec()).unwrap();
            assert_eq!(vq.decode(&single).unwrap().data, joint.frame(t));
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vq = VqVae::new(small_cfg(), &mut rng).unwrap();
        let bad = PowerSpectrogram { n_frames: 1, n_bins: 257, hop: 1, data: vec![0.0; 257] };
        assert!(vq.encode(&bad).is_err());
        assert!(vq.decode(&Tensor::zeros(&[2, 32, 8])).is_err());
    }

    #[test]
    fn quantize_is_idempotent_on_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vq = VqVae::new(VqVaeConfig::default(), &mut rng).unwrap();
        let cb = vq.codebook();
        let all: Vec<usize> = (0..256).collect();
        assert_eq!(cb.quantize(&cb.lookup(&all)), all);
    }

    #[test]
    fn loss_is_zero_at_perfect_fit() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let z = g.input(Tensor::new(&[2, 2], vec![0.5, -0.5, 1.0, 0.0]).unwrap()).unwrap();
        let l = vqvae_loss(&mut g, x, x, z, z, 0.25).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn loss_matches_scalar_hand_computation() {
        // one frame of 3 bins, two latent positions, e = 2, k = 2
        let x = [1.0, 2.0, 3.0];
        let x_rec = [1.5, 2.0, 2.0];
        let z_e = [0.2, 0.1, 0.9, 1.2];
        let codes = [[0.0, 0.0], [1.0, 1.0]];
        let chosen = [0usize, 1];
        let beta = 0.25;
        // hand: recon = (0.25 + 0 + 1)/3; latent sq err = (0.04 + 0.01 + 0.01 + 0.04)/4
        let recon = (0.25 + 0.0 + 1.0) / 3.0;
        let latent = (0.04 + 0.01 + 0.01 + 0.04) / 4.0;
        let expected = recon + latent + beta * latent;

        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[1, 3], x.to_vec()).unwrap()).unwrap();
        let xr = g.input(Tensor::new(&[1, 3], x_rec.to_vec()).unwrap()).unwrap();
        let ze = g.input(Tensor::new(&[2, 2], z_e.to_vec()).unwrap()).unwrap();
        let cb = g.input(Tensor::new(&[2, 2], codes.concat()).unwrap()).unwrap();
        let zq = g.gather_rows(cb, &chosen).unwrap();
        let l = vqvae_loss(&mut g, xv, xr, ze, zq, beta).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        let l0 = vqvae_loss(&mut g, xv, xr, ze, zq, 0.0).unwrap();
        assert!((g.value(l0).item() - (recon + latent)).abs() < 1e-12);
        // commitment and codebook gradients
        let grads = g.backward(l).unwrap();
        let gze = grads.wrt(ze).unwrap();
        let gcb = grads.wrt(cb).unwrap();
        for i in 0..4 {
            let diff = z_e[i] - codes[chosen[i / 2]][i % 2];
            assert!((gze[i] - beta * 2.0 * diff / 4.0).abs() < 1e-12);
        }
        assert!((gcb[0] - (-2.0 * 0.2 / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn straight_through_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vq = VqVae::new(small_cfg(), &mut rng).unwrap();
        let z_e = Tensor::from_fn(&[2 * 64, 8], |_| rng.gen_range(-1.0..1.0));
        let z_q = Tensor::new(z_e.shape(), vq.codebook().lookup(&vq.codebook().quantize(z_e.data()))).unwrap();
        let w = Tensor::from_fn(&[2, 513], |_| rng.gen_range(-1.0..1.0));
        let grad_at = |through_st: bool| {
            let mut g = Graph::new();
            let src = g.input(if through_st { z_e.clone() } else { z_q.clone() }).unwrap();
            let z = if through_st { g.straight_through(src, z_q.clone()).unwrap() } else { src };
            let z = g.reshape(z, &[2, 64, 8]).unwrap();
            let y = vq.decoder_forward(&mut g, z).unwrap();
            let wv = g.constant(w.clone()).unwrap();
            let p = g.mul(y, wv).unwrap();
            let s = g.sum(p);
            g.backward(s).unwrap().wrt(src).unwrap().to_vec()
        };
        assert_eq!(grad_at(true), grad_at(false));
    }

    #[test]
    fn training_graph_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vq = VqVae::new(VqVaeConfig { channels1: 3, channels2: 4, codes: 8, code_dim: 2, ..Default::default() }, &mut rng).unwrap();
        let frames: Vec<f64> = (0..2 * 513).map(|_| rng.gen_range(0.0..20.0)).collect();
        vq.store.set_trainable("codebook", false);
        // zero biases over dead ReLU inputs sit exactly on the kink
        for p in vq.store.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        let model = vq.clone();
        let report = grad_check(
            &mut vq.store,
            |g, store| {
                let mut m = model.clone();
                m.store = store.clone();
                m.forward_continuous(g, &frames).map_err(|e| NdError::Shape(e.to_string()))
            },
            1e-6,
            1e-3,
            12,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
