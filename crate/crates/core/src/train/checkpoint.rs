//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VQMS" u32:version
//! str:kind str:config_text [32]:sha256(config_text)
//! u64:epoch u64:rng_seed u128:rng_word_pos
//! u32:n_params { str:name u8:flags u32:rank u64*rank:dims f64*numel }
//! u8:has_optimizer [u64:step u64:skipped f64,f64(β) f64:eps f64:wd { f64*numel m, f64*numel v } per param]
//! u32:n_extras { str:name u64:len u64*len }
//! ```
//! `str` is a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::AdamW;
use crate::error::{Error, Result};
use crate::ndauto::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"VQMS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `vqvae`, `mae` or `finetune`.
    pub kind: String,
    /// Canonical text of the configuration the model was built from.
    pub config_text: String,
    pub epoch: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub params: Vec<NamedParam>,
    pub optimizer: Option<AdamW>,
    pub extras: Vec<(String, Vec<u64>)>,
}

pub fn fingerprint(config_text: &str) -> [u8; 32] {
    Sha256::digest(config_text.as_bytes()).into()
}

pub fn fingerprint_hex(config_text: &str) -> String {
    fingerprint(config_text).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_store(kind: &str, config_text: &str, store: &ParamStore) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config_text: config_text.to_string(),
            epoch: 0,
            rng_seed: 0,
            rng_word_pos: 0,
            params: store.iter().map(|(_, p)| NamedParam { name: p.name.clone(), value: p.value.clone(), trainable: p.trainable, decay: p.decay }).collect(),
            optimizer: None,
            extras: Vec::new(),
        }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint(&self.config_text)
    }

    pub fn extra(&self, name: &str) -> Option<&[u64]> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Copies every parameter whose name starts with `prefix` into `store`;
    /// names and shapes must match exactly. Returns the number copied.
    pub fn restore_into(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let id = store.id(&p.name).ok_or_else(|| Error::Checkpoint(format!("model has no parameter {}", p.name)))?;
            let dst = store.get_mut(id);
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("{}: checkpoint shape {:?}, model shape {:?}", p.name, p.value.shape(), dst.value.shape())));
            }
            dst.value = p.value.clone();
            n += 1;
        }
        let missing: Vec<&str> =
            store.iter().filter(|(_, q)| q.name.starts_with(prefix) && self.param(&q.name).is_none()).map(|(_, q)| q.name.as_str()).collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint lacks parameters: {}", missing.join(", "))));
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut w, &self.kind);
        put_str(&mut w, &self.config_text);
        w.extend_from_slice(&self.fingerprint());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.rng_seed.to_le_bytes());
        w.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut w, &p.name);
            w.push(p.trainable as u8 | (p.decay as u8) << 1);
            w.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut w, p.value.data());
        }
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                w.extend_from_slice(&o.step.to_le_bytes());
                w.extend_from_slice(&o.skipped.to_le_bytes());
                put_f64s(&mut w, &[o.beta1, o.beta2, o.eps, o.weight_decay]);
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_f64s(&mut w, m);
                    put_f64s(&mut w, v);
                }
            }
        }
        w.extend_from_slice(&(self.extras.len() as u32).to_le_bytes());
        for (name, vals) in &self.extras {
            put_str(&mut w, name);
            w.extend_from_slice(&(vals.len() as u64).to_le_bytes());
            for v in vals {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string()?;
        let config_text = r.string()?;
        let stored: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if stored != fingerprint(&config_text) {
            return Err(Error::Checkpoint("corrupt checkpoint: fingerprint does not match embedded config".into()));
        }
        let epoch = r.u64()?;
        let rng_seed = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let flags = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f64s(numel)?;
            let value = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.push(NamedParam { name, value, trainable: flags & 1 != 0, decay: flags & 2 != 0 });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            _ => {
                let step = r.u64()?;
                let skipped = r.u64()?;
                let h = r.f64s(4)?;
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for p in &params {
                    m.push(r.f64s(p.value.numel())?);
                    v.push(r.f64s(p.value.numel())?);
                }
                Some(AdamW { beta1: h[0], beta2: h[1], eps: h[2], weight_decay: h[3], step, skipped, m, v })
            }
        };
        let n_extras = r.u32()? as usize;
        let mut extras = Vec::with_capacity(n_extras);
        for _ in 0..n_extras {
            let name = r.string()?;
            let len = r.u64()? as usize;
            extras.push((name, (0..len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { kind, config_text, epoch, rng_seed, rng_word_pos, params, optimizer, extras })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint of `kind`. With `expected_config` given, a
    /// fingerprint mismatch is refused unless `force` is set.
    pub fn load(path: impl AsRef<Path>, kind: &str, expected_config: Option<&str>, force: bool) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!("{}: expected a {kind} checkpoint, found {}", path.display(), ck.kind)));
        }
        if let Some(cfg) = expected_config {
            if !force && fingerprint(cfg) != ck.fingerprint() {
                return Err(Error::Checkpoint(format!(
                    "{}: config fingerprint {} differs from the current config's {} (pass --force to load anyway)",
                    path.display(),
                    &fingerprint_hex(&ck.config_text)[..12],
                    &fingerprint_hex(cfg)[..12]
                )));
            }
        }
        Ok(ck)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos.saturating_add(n)).ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 before byte {}", self.pos)))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[3, 4], |_| rng.gen::<f64>() * 1e-300), true);
        s.add("a.bias", Tensor::from_fn(&[4], |_| rng.gen_range(-1.0..1.0)), false);
        s.add("b", Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(), false);
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = store();
        let mut ck = Checkpoint::from_store("mae", "mae.depth = 4\n", &s);
        let mut opt = AdamW::new(&s);
        opt.m[0][1] = 0.1 + 0.2;
        opt.step = 7;
        ck.optimizer = Some(opt);
        ck.epoch = 3;
        ck.rng_seed = 42;
        ck.rng_word_pos = 1 << 70;
        ck.extras.push(("usage".into(), vec![1, 2, u64::MAX]));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        for (a, b) in back.params.iter().zip(&ck.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn fingerprint_mismatch_is_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        Checkpoint::from_store("vqvae", "vqvae.codes = 256\n", &store()).save(&path).unwrap();
        assert!(Checkpoint::load(&path, "vqvae", Some("vqvae.codes = 256\n"), false).is_ok());
        let err = Checkpoint::load(&path, "vqvae", Some("vqvae.codes = 128\n"), false).unwrap_err();
        assert!(err.to_string().contains("--force"), "{err}");
        assert!(Checkpoint::load(&path, "vqvae", Some("vqvae.codes = 128\n"), true).is_ok());
        assert!(Checkpoint::load(&path, "mae", None, false).is_err());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let bytes = Checkpoint::from_store("vqvae", "k = v\n", &store()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut bad = bytes.clone();
        bad[20] ^= 1; // inside the embedded config text
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let ck = Checkpoint::from_store("mae", "", &store());
        let mut fresh = ParamStore::new();
        fresh.add("a.weight", Tensor::zeros(&[3, 4]), true);
        fresh.add("a.bias", Tensor::zeros(&[4]), false);
        assert_eq!(ck.restore_into(&mut fresh, "a.").unwrap(), 2);
        assert_eq!(fresh.value(fresh.id("a.bias").unwrap()), ck.param("a.bias").unwrap());
        let mut wrong = ParamStore::new();
        wrong.add("a.weight", Tensor::zeros(&[4, 3]), true);
        assert!(ck.restore_into(&mut wrong, "a.").is_err());
    }
}
