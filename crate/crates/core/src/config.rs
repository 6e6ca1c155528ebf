//! Plain-text run configuration: `[section]` headers followed by
//! `key = value` lines, `#` comments. Every key has a default; unknown
//! sections or keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::heads::{AslConfig, HeadKind};
use crate::mae::MaeConfig;
use crate::tokens::MaskStrategy;
use crate::train::{fingerprint_hex, FinetuneConfig, MaeTrainConfig, VqTrainConfig};
use crate::vqvae::VqVaeConfig;

/// `(section, key, default)` for every accepted setting, in output order.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("dsp", "sample_rate", "16000"),
    ("dsp", "fft_size", "1024"),
    ("dsp", "hop", "307"),
    ("vqvae", "channels1", "32"),
    ("vqvae", "channels2", "64"),
    ("vqvae", "codes", "256"),
    ("vqvae", "beta", "0.25"),
    ("vqvae", "log_compress", "true"),
    ("tokens", "t", "10"),
    ("tokens", "d", "4"),
    ("tokens", "e", "8"),
    ("tokens", "frames", "100"),
    ("tokens", "strategy", "patch-tf"),
    ("tokens", "ratio", "0.8"),
    ("tokens", "train_embedding", "true"),
    ("mae", "depth", "12"),
    ("mae", "decoder_depth", "4"),
    ("mae", "heads", "4"),
    ("mae", "mlp_ratio", "4"),
    ("heads", "type", "cls"),
    ("heads", "gamma_pos", "0"),
    ("heads", "gamma_neg", "4"),
    ("heads", "margin", "0.05"),
    ("heads", "freeze_encoder", "false"),
    ("train", "seed", "0"),
    ("train", "folds", "5"),
    ("train", "warmup_frac", "0.1"),
    ("train", "min_lr", "1e-6"),
    ("train", "vq_epochs", "10"),
    ("train", "vq_batch", "64"),
    ("train", "vq_lr", "4e-3"),
    ("train", "vq_pool_frames", "4096"),
    ("train", "vq_reseed_every", "1"),
    ("train", "vq_data_init", "true"),
    ("train", "mae_epochs", "20"),
    ("train", "mae_batch", "32"),
    ("train", "mae_lr", "1e-3"),
    ("train", "ft_epochs", "20"),
    ("train", "ft_batch", "32"),
    ("train", "ft_lr", "1e-4"),
    ("data", "source", "synthetic"),
    ("data", "manifest", ""),
    ("data", "audio_root", ""),
    ("data", "classes", "4"),
    ("data", "speakers", "20"),
    ("data", "per_speaker", "50"),
    ("data", "min_secs", "1.5"),
    ("data", "max_secs", "2.5"),
    ("data", "jitter", "0.35"),
    ("data", "seed", "0"),
];

/// What a checkpoint holds; decides which settings its fingerprint covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    VqVae,
    Mae,
    Finetune,
}

impl ArtifactKind {
    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::VqVae => "vqvae",
            ArtifactKind::Mae => "mae",
            ArtifactKind::Finetune => "finetune",
        }
    }

    /// Architecture-defining keys: training hyperparameters and masking
    /// choices are left out so they can vary without invalidating weights.
    fn covers(self, section: &str, key: &str) -> bool {
        let vq = section == "dsp" || section == "vqvae" || (section, key) == ("tokens", "e");
        let mae = vq || section == "mae" || (section == "tokens" && !matches!(key, "strategy" | "ratio"));
        match self {
            ArtifactKind::VqVae => vq,
            ArtifactKind::Mae => mae,
            ArtifactKind::Finetune => mae || section == "heads",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<(String, String), String>,
}

impl Default for Config {
    fn default() -> Self {
        let values = SCHEMA.iter().map(|&(s, k, v)| ((s.to_string(), k.to_string()), v.to_string())).collect();
        Config { values }
    }
}

fn known(section: &str, key: &str) -> bool {
    SCHEMA.iter().any(|&(s, k, _)| s == section && k == key)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|&(s, _, _)| s == name) {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)));
            };
            let key = key.trim();
            let full = match (key.split_once('.'), &section) {
                (Some((s, k)), _) => format!("{s}.{k}"),
                (None, Some(s)) => format!("{s}.{key}"),
                (None, None) => return Err(Error::Config(format!("line {}: key {key:?} outside any section", n + 1))),
            };
            cfg.set(&full, value.trim()).map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// Sets `section.key`; the value is type-checked when the config is
    /// validated.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (s, k) = dotted.split_once('.').ok_or_else(|| Error::Config(format!("setting {dotted:?} is not of the form section.key")))?;
        if !known(s, k) {
            return Err(Error::Config(format!("unknown key {s}.{k}")));
        }
        self.values.insert((s.into(), k.into()), value.into());
        Ok(())
    }

    /// Applies `section.key=value` overrides and re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn raw(&self, section: &str, key: &str) -> &str {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str).unwrap_or_else(|| panic!("{section}.{key} not in schema"))
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self.raw(section, key);
        raw.parse().map_err(|_| Error::Config(format!("{section}.{key} = {raw:?} is not a valid {}", short_type::<T>())))
    }

    /// Every value in schema order, as config text.
    pub fn to_text(&self) -> String {
        self.render(|_, _| true)
    }

    /// The settings a checkpoint of `kind` depends on, as canonical text.
    pub fn canonical(&self, kind: ArtifactKind) -> String {
        self.render(|s, k| kind.covers(s, k))
    }

    pub fn fingerprint(&self, kind: ArtifactKind) -> String {
        fingerprint_hex(&self.canonical(kind))
    }

    fn render(&self, keep: impl Fn(&str, &str) -> bool) -> String {
        let mut out = String::new();
        let mut current = "";
        for &(s, k, _) in SCHEMA {
            if !keep(s, k) {
                continue;
            }
            if s != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{s}]").unwrap();
                current = s;
            }
            writeln!(out, "{k} = {}", self.raw(s, k)).unwrap();
        }
        out
    }

    /// Type-checks every value and the cross-key constraints.
    pub fn validate(&self) -> Result<()> {
        self.stft()?;
        self.vqvae()?.validate()?;
        self.mae()?.validate()?;
        self.asl()?.validate()?;
        self.vq_train()?;
        self.mae_train()?;
        self.finetune()?;
        if self.get::<usize>("train", "folds")? < 2 {
            return Err(Error::Config("train.folds must be at least 2".into()));
        }
        match self.raw("data", "source") {
            "synthetic" => self.synthetic()?.validate(),
            "manifest" if self.raw("data", "manifest").is_empty() => Err(Error::Config("data.source = manifest needs data.manifest".into())),
            "manifest" => Ok(()),
            other => Err(Error::Config(format!("data.source must be synthetic or manifest, got {other:?}"))),
        }
    }

    pub fn sample_rate(&self) -> Result<u32> {
        self.get("dsp", "sample_rate")
    }

    pub fn stft(&self) -> Result<StftConfig> {
        let cfg = StftConfig { fft_size: self.get("dsp", "fft_size")?, hop: self.get("dsp", "hop")? };
        if cfg.fft_size < 2 || cfg.hop == 0 {
            return Err(Error::Config("dsp.fft_size must be at least 2 and dsp.hop positive".into()));
        }
        Ok(cfg)
    }

    pub fn vqvae(&self) -> Result<VqVaeConfig> {
        Ok(VqVaeConfig {
            n_bins: self.stft()?.bins(),
            channels1: self.get("vqvae", "channels1")?,
            channels2: self.get("vqvae", "channels2")?,
            codes: self.get("vqvae", "codes")?,
            code_dim: self.get("tokens", "e")?,
            beta: self.get("vqvae", "beta")?,
            log_compress: self.get("vqvae", "log_compress")?,
        })
    }

    pub fn mae(&self) -> Result<MaeConfig> {
        Ok(MaeConfig {
            t: self.get("tokens", "t")?,
            d: self.get("tokens", "d")?,
            frames: self.get("tokens", "frames")?,
            width: VqVaeConfig::LATENT_POSITIONS,
            code_dim: self.get("tokens", "e")?,
            codes: self.get("vqvae", "codes")?,
            depth: self.get("mae", "depth")?,
            decoder_depth: self.get("mae", "decoder_depth")?,
            heads: self.get("mae", "heads")?,
            mlp_ratio: self.get("mae", "mlp_ratio")?,
            train_embedding: self.get("tokens", "train_embedding")?,
        })
    }

    pub fn strategy(&self) -> Result<MaskStrategy> {
        self.raw("tokens", "strategy").parse()
    }

    pub fn head(&self) -> Result<HeadKind> {
        self.raw("heads", "type").parse()
    }

    pub fn asl(&self) -> Result<AslConfig> {
        Ok(AslConfig { gamma_pos: self.get("heads", "gamma_pos")?, gamma_neg: self.get("heads", "gamma_neg")?, margin: self.get("heads", "margin")? })
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("train", "seed")
    }

    pub fn vq_train(&self) -> Result<VqTrainConfig> {
        Ok(VqTrainConfig {
            epochs: self.get("train", "vq_epochs")?,
            batch: self.get("train", "vq_batch")?,
            pool_frames: self.get("train", "vq_pool_frames")?,
            base_lr: self.get("train", "vq_lr")?,
            min_lr: self.get("train", "min_lr")?,
            warmup_frac: self.get("train", "warmup_frac")?,
            reseed_every: self.get("train", "vq_reseed_every")?,
            data_init: self.get("train", "vq_data_init")?,
            seed: self.seed()?,
        })
    }

    pub fn mae_train(&self) -> Result<MaeTrainConfig> {
        let ratio: f64 = self.get("tokens", "ratio")?;
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("tokens.ratio must be in [0, 1), got {ratio}")));
        }
        Ok(MaeTrainConfig {
            epochs: self.get("train", "mae_epochs")?,
            batch: self.get("train", "mae_batch")?,
            base_lr: self.get("train", "mae_lr")?,
            min_lr: self.get("train", "min_lr")?,
            warmup_frac: self.get("train", "warmup_frac")?,
            strategy: self.strategy()?,
            ratio,
            seed: self.seed()?,
        })
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            epochs: self.get("train", "ft_epochs")?,
            batch: self.get("train", "ft_batch")?,
            base_lr: self.get("train", "ft_lr")?,
            min_lr: self.get("train", "min_lr")?,
            warmup_frac: self.get("train", "warmup_frac")?,
            head: self.head()?,
            asl: self.asl()?,
            freeze_encoder: self.get("heads", "freeze_encoder")?,
            seed: self.seed()?,
        })
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            classes: self.get("data", "classes")?,
            speakers: self.get("data", "speakers")?,
            per_speaker: self.get("data", "per_speaker")?,
            min_secs: self.get("data", "min_secs")?,
            max_secs: self.get("data", "max_secs")?,
            jitter: self.get("data", "jitter")?,
            seed: self.get("data", "seed")?,
        })
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn short_type<T>() -> &'static str {
    let name = std::any::type_name::<T>();
    name.rsplit("::").next().unwrap_or(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.mae().unwrap().token_width(), 320);
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        let e = Config::parse("[mae]\ndepht = 3\n").unwrap_err();
        assert!(e.is_usage() && e.to_string().contains("mae.depht"), "{e}");
        assert!(Config::parse("[nope]\n").unwrap_err().to_string().contains("[nope]"));
        assert!(Config::parse("depth = 3\n").is_err());
    }

    #[test]
    fn values_are_type_checked() {
        let e = Config::parse("[train]\nseed = abc\n").unwrap_err();
        assert!(e.to_string().contains("train.seed"), "{e}");
        assert!(Config::parse("[tokens]\nstrategy = diagonal\n").is_err());
        assert!(Config::parse("[mae]\ndepth = 2\ndecoder_depth = 2\n").is_err());
    }

    #[test]
    fn sections_comments_and_dotted_keys() {
        let cfg = Config::parse("# run\n[tokens]\nt = 1 # one frame\nd = 64\nmae.depth = 6\n[heads]\ntype = query2emo\n").unwrap();
        assert_eq!(cfg.get::<usize>("tokens", "d").unwrap(), 64);
        assert_eq!(cfg.get::<usize>("mae", "depth").unwrap(), 6);
        assert_eq!(cfg.head().unwrap(), HeadKind::Query2Emo);
    }

    #[test]
    fn fingerprints_ignore_training_settings() {
        let a = Config::default();
        let mut b = a.clone();
        b.apply_overrides(&["train.mae_lr=0.5", "tokens.ratio=0.6", "heads.type=query2emo"]).unwrap();
        assert_eq!(a.fingerprint(ArtifactKind::Mae), b.fingerprint(ArtifactKind::Mae));
        assert_ne!(a.fingerprint(ArtifactKind::Finetune), b.fingerprint(ArtifactKind::Finetune));
        b.apply_overrides(&["mae.depth=6"]).unwrap();
        assert_ne!(a.fingerprint(ArtifactKind::Mae), b.fingerprint(ArtifactKind::Mae));
        assert_eq!(a.fingerprint(ArtifactKind::VqVae), b.fingerprint(ArtifactKind::VqVae));
    }
}
