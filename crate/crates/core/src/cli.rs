//! The `vqmae` command line: every pipeline stage as a subcommand writing
//! into its own run directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ArtifactKind, Config};
use crate::data::{read_fold_plan, write_corpus, write_fold_plan, CorpusManifest};
use crate::dsp::export::{pgm_bytes, spectrogram_csv, spectrogram_pgm, write_file};
use crate::dsp::{load_wav, PowerSpectrogram};
use crate::error::{Error, Result};
use crate::mae::reconstruct as mae_reconstruct;
use crate::pipeline::{self, Corpus};
use crate::tokens::{make_mask, patchify, MaskStrategy, TokenGeometry};
use crate::train::{crop_wrap, evaluate, fingerprint_hex, MetricsLog};
use crate::vqvae::{QuantizedGrid, VqVae};

/// Environment variable naming the default run root.
pub const RUN_ROOT_ENV: &str = "VQMAE_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "vqmae", version, about = "Masked autoencoding over VQ-VAE speech tokens, with emotion-recognition fine-tuning")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration file (`[section]` / `key = value`); defaults apply to omitted keys
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set mae.depth=4` (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Parent of timestamped run directories [env: VQMAE_RUN_ROOT, default: runs]
    #[arg(long, global = true)]
    pub run_root: Option<PathBuf>,
    /// Write outputs to exactly this directory instead of a new run directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Threads for data loading and tokenization; results do not depend on it
    #[arg(long, default_value_t = 1, global = true)]
    pub workers: usize,
    /// Load checkpoints even when their config fingerprint differs
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic emotional-speech corpus as WAVs plus manifest.csv
    MakeSynthetic,
    /// Train the VQ-VAE on corpus spectrogram frames
    VqvaePretrain {
        /// Corpus directory with manifest.csv (default: the config's data source)
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Masked pretraining of the MAE on the VQ-VAE's tokens
    MaePretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vqvae: PathBuf,
    },
    /// Speaker-disjoint cross-validated fine-tuning of encoder + head
    Finetune {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vqvae: PathBuf,
        /// Pretrained MAE; omit together with --scratch to train from random init
        #[arg(long, required_unless_present = "scratch")]
        mae: Option<PathBuf>,
        #[arg(long, conflicts_with = "mae")]
        scratch: bool,
    },
    /// Evaluate a fine-tuned classifier checkpoint
    Evaluate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Fold plan CSV (default: folds.csv next to the model)
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Spectrogram → tokens → spectrogram, optionally through MAE masking
    Reconstruct {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        mae: Option<PathBuf>,
        /// WAV file to reconstruct (default: utterance --index of the corpus)
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Mask seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw one mask over an nt × nd token grid
    InspectMask {
        #[arg(long, default_value = "patch-tf")]
        strategy: String,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        /// Token rows (time blocks)
        #[arg(long, default_value_t = 10)]
        nt: usize,
        /// Token columns (frequency blocks)
        #[arg(long, default_value_t = 16)]
        nd: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain + cross-validate over an ablation grid, one CSV row per point
    Sweep {
        #[arg(value_enum)]
        axis: SweepAxis,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Reuse this VQ-VAE where the grid point's VQ-VAE settings match
        #[arg(long)]
        vqvae: Option<PathBuf>,
        /// List the grid points without training
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// 4 strategies × ratios 0.5–0.9
    Masking,
    /// Code dimension e ∈ {4, 8, 16}
    EmbedDim,
    /// Encoder depth L ∈ {6, 12, 16, 20}
    Depth,
    /// Token shape (t, d) ∈ {5, 10, 20} × {2, 4, 8}
    Patch,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Masking => "masking",
            SweepAxis::EmbedDim => "embed-dim",
            SweepAxis::Depth => "depth",
            SweepAxis::Patch => "patch",
        }
    }
}

/// Config overrides for every point of a sweep. Frame masking switches to
/// one-frame tokens (`t = 1`, `d = D′`), the only geometry it is defined on.
pub fn sweep_points(axis: SweepAxis) -> Vec<Vec<(String, String)>> {
    let kv = |pairs: &[(&str, String)]| pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<Vec<_>>();
    match axis {
        SweepAxis::Masking => {
            let mut out = Vec::new();
            for s in MaskStrategy::ALL {
                for r in [0.5, 0.6, 0.7, 0.8, 0.9] {
                    let mut p = kv(&[("tokens.strategy", s.name().into()), ("tokens.ratio", format!("{r}"))]);
                    if s == MaskStrategy::Frame {
                        p.extend(kv(&[("tokens.t", "1".into()), ("tokens.d", "64".into())]));
                    }
                    out.push(p);
                }
            }
            out
        }
        SweepAxis::EmbedDim => [4, 8, 16].iter().map(|e| kv(&[("tokens.e", e.to_string())])).collect(),
        SweepAxis::Depth => [6, 12, 16, 20].iter().map(|l| kv(&[("mae.depth", l.to_string())])).collect(),
        SweepAxis::Patch => {
            let mut out = Vec::new();
            for t in [5, 10, 20] {
                for d in [2, 4, 8] {
                    out.push(kv(&[("tokens.t", t.to_string()), ("tokens.d", d.to_string())]));
                }
            }
            out
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 success, 1 usage or configuration
/// error, 2 runtime error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

/// A run directory with its log.
pub struct Run {
    pub dir: PathBuf,
    log: fs::File,
}

impl Run {
    fn create(common: &Common, name: &str, cfg: &Config) -> Result<Run> {
        let dir = match &common.out {
            Some(d) => d.clone(),
            None => {
                let root = common.run_root.clone().or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"));
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
                let hash = &fingerprint_hex(&cfg.to_text())[..8];
                let base = root.join(format!("{name}-{stamp}-{hash}"));
                let mut dir = base.clone();
                let mut n = 1;
                while dir.exists() {
                    dir = PathBuf::from(format!("{}-{n}", base.display()));
                    n += 1;
                }
                dir
            }
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(dir.join("config.txt"), e))?;
        let log_path = dir.join("log.txt");
        let log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut run = Run { dir, log };
        run.line(&format!("run {name} dir={}", run.dir.display()));
        Ok(run)
    }

    /// One log line, to the run log and standard error.
    pub fn line(&mut self, s: &str) {
        eprintln!("{s}");
        let _ = writeln!(self.log, "{s}");
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    if c.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let cfg = load_config(c)?;
    match &cli.command {
        Command::MakeSynthetic => make_synthetic(c, &cfg),
        Command::VqvaePretrain { corpus } => vqvae_pretrain(c, &cfg, corpus.as_deref()),
        Command::MaePretrain { corpus, vqvae } => mae_pretrain(c, &cfg, corpus.as_deref(), vqvae),
        Command::Finetune { corpus, vqvae, mae, .. } => finetune(c, &cfg, corpus.as_deref(), vqvae, mae.as_deref()),
        Command::Evaluate { corpus, vqvae, model, folds, split } => evaluate_cmd(c, &cfg, corpus.as_deref(), vqvae, model, folds.as_deref(), *split),
        Command::Reconstruct { vqvae, mae, wav, corpus, index, seed } => {
            reconstruct(c, &cfg, vqvae, mae.as_deref(), wav.as_deref(), corpus.as_deref(), *index, *seed)
        }
        Command::InspectMask { strategy, ratio, nt, nd, seed } => inspect_mask(c, &cfg, strategy, *ratio, *nt, *nd, *seed),
        Command::Sweep { axis, corpus, vqvae, dry_run } => sweep(c, &cfg, *axis, corpus.as_deref(), vqvae.as_deref(), *dry_run),
    }
}

fn corpus(c: &Common, cfg: &Config, dir: Option<&Path>, run: &mut Run) -> Result<Corpus> {
    let mut corpus = pipeline::load_corpus(cfg, dir, c.workers)?;
    for w in &corpus.warnings {
        run.line(&format!("warning {w}"));
    }
    if let Some(d) = dir {
        // keep the generator's class order when the corpus says so
        if let Ok(text) = fs::read_to_string(d.join("classes.txt")) {
            corpus = reorder_classes(corpus, text.lines().map(str::to_string).collect())?;
        }
    }
    run.line(&format!("corpus utterances={} speakers={} classes={}", corpus.manifest.len(), corpus.manifest.speakers().len(), corpus.manifest.classes.len()));
    Ok(corpus)
}

fn reorder_classes(mut corpus: Corpus, order: Vec<String>) -> Result<Corpus> {
    let mut map = Vec::with_capacity(corpus.manifest.classes.len());
    for name in &corpus.manifest.classes {
        map.push(order.iter().position(|o| o == name).ok_or_else(|| Error::Data(format!("label {name:?} missing from classes.txt")))?);
    }
    for r in &mut corpus.manifest.records {
        r.label = map[r.label];
    }
    corpus.manifest.classes = order;
    Ok(corpus)
}

fn tokens_for(c: &Common, cfg: &Config, vq: &VqVae, corpus: &Corpus) -> Result<Vec<QuantizedGrid>> {
    let specs = pipeline::spectrograms(&corpus.waves, &cfg.stft()?, c.workers)?;
    pipeline::tokenize(vq, &specs, c.workers)
}

fn make_synthetic(c: &Common, cfg: &Config) -> Result<()> {
    let mut run = Run::create(c, "make-synthetic", cfg)?;
    let spec = cfg.synthetic()?;
    let items: Vec<usize> = (0..spec.len()).collect();
    let pairs = pipeline::par_map(&items, c.workers, |&i| Ok(spec.utterance(i)))?;
    let (records, waves): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let manifest = CorpusManifest { classes: spec.class_names(), records };
    let csv = write_corpus(&run.dir, &manifest, &waves)?;
    run.write("classes.txt", &(manifest.classes.join("\n") + "\n"))?;
    let plan = pipeline::folds(cfg, &manifest)?;
    write_fold_plan(&plan, run.path("folds.csv"))?;
    run.line(&format!("wrote utterances={} speakers={} manifest={}", manifest.len(), manifest.speakers().len(), csv.display()));
    Ok(())
}

fn vqvae_pretrain(c: &Common, cfg: &Config, dir: Option<&Path>) -> Result<()> {
    let mut run = Run::create(c, "vqvae-pretrain", cfg)?;
    let corpus = corpus(c, cfg, dir, &mut run)?;
    let specs = pipeline::spectrograms(&corpus.waves, &cfg.stft()?, c.workers)?;
    let mut csv = String::from("epoch,loss,recon_loss,entropy,reseeded\n");
    let mut lines = Vec::new();
    let (vq, out) = pipeline::train_vqvae(cfg, &specs, &mut |e| {
        writeln!(csv, "{},{:.10},{:.10},{:.10},{}", e.epoch, e.loss, e.recon_loss, e.entropy, e.reseeded).unwrap();
        let l = format!("vqvae epoch={} loss={:.6} recon={:.6} entropy={:.4} reseeded={}", e.epoch, e.loss, e.recon_loss, e.entropy, e.reseeded);
        eprintln!("{l}");
        lines.push(l);
    })?;
    for l in lines {
        let _ = writeln!(run.log, "{l}");
    }
    run.write("vqvae_metrics.csv", &csv)?;
    pipeline::vqvae_checkpoint(cfg, &vq, Some(&out))?.save(run.path("vqvae.ckpt"))?;
    run.line(&format!("saved {}", run.path("vqvae.ckpt").display()));
    Ok(())
}

fn mae_pretrain(c: &Common, cfg: &Config, dir: Option<&Path>, vq_path: &Path) -> Result<()> {
    let mut run = Run::create(c, "mae-pretrain", cfg)?;
    let vq = pipeline::load_vqvae(cfg, vq_path, c.force)?;
    let corpus = corpus(c, cfg, dir, &mut run)?;
    let grids = tokens_for(c, cfg, &vq, &corpus)?;
    let mut csv = String::from("epoch,loss,masked_acc\n");
    let mut lines = Vec::new();
    let (mae, out) = pipeline::pretrain_mae(cfg, &vq, &grids, &mut |e| {
        writeln!(csv, "{},{:.10},{:.10}", e.epoch, e.loss, e.masked_acc).unwrap();
        let l = format!("mae epoch={} loss={:.6} masked_acc={:.4}", e.epoch, e.loss, e.masked_acc);
        eprintln!("{l}");
        lines.push(l);
    })?;
    for l in lines {
        let _ = writeln!(run.log, "{l}");
    }
    run.write("mae_metrics.csv", &csv)?;
    pipeline::mae_checkpoint(cfg, &mae, Some(&out))?.save(run.path("mae.ckpt"))?;
    run.line(&format!("saved {}", run.path("mae.ckpt").display()));
    Ok(())
}

fn finetune(c: &Common, cfg: &Config, dir: Option<&Path>, vq_path: &Path, mae_path: Option<&Path>) -> Result<()> {
    let mut run = Run::create(c, "finetune", cfg)?;
    let vq = pipeline::load_vqvae(cfg, vq_path, c.force)?;
    let mae = match mae_path {
        Some(p) => pipeline::load_mae(cfg, p, c.force)?,
        None => pipeline::init_mae(cfg, &vq)?,
    };
    let corpus = corpus(c, cfg, dir, &mut run)?;
    let grids = tokens_for(c, cfg, &vq, &corpus)?;
    let plan = pipeline::folds(cfg, &corpus.manifest)?;
    write_fold_plan(&plan, run.path("folds.csv"))?;
    let mut saved = Vec::new();
    let report = pipeline::cross_validate(cfg, &mae, &corpus.manifest, &grids, &plan, &mut |res, model| {
        let path = run.path(&format!("fold{}.ckpt", res.fold));
        saved.push(pipeline::finetune_checkpoint(cfg, model, res.fold).and_then(|ck| ck.save(&path)));
        eprintln!("finetune fold={} acc={:.4} f1={:.4}", res.fold, res.accuracy, res.macro_f1);
    })?;
    saved.into_iter().collect::<Result<Vec<_>>>()?;
    for f in &report.folds {
        let _ = writeln!(run.log, "finetune fold={} acc={:.4} f1={:.4}", f.fold, f.accuracy, f.macro_f1);
    }
    report.log.write(run.path("metrics.csv"))?;
    run.write("confusion.csv", &report.confusion().to_csv(&corpus.manifest.classes))?;
    let ((am, asd), (fm, fsd)) = (report.accuracy(), report.macro_f1());
    let summary = format!("accuracy_mean={am:.6}\naccuracy_std={asd:.6}\nf1_mean={fm:.6}\nf1_std={fsd:.6}\n");
    run.write("summary.txt", &summary)?;
    run.line(&format!("finetune acc={am:.4}±{asd:.4} f1={fm:.4}±{fsd:.4}"));
    Ok(())
}

fn evaluate_cmd(c: &Common, cfg: &Config, dir: Option<&Path>, vq_path: &Path, model_path: &Path, folds: Option<&Path>, split: Split) -> Result<()> {
    let mut run = Run::create(c, "evaluate", cfg)?;
    let vq = pipeline::load_vqvae(cfg, vq_path, c.force)?;
    let (model, fold) = pipeline::load_classifier(cfg, model_path, c.force)?;
    let corpus = corpus(c, cfg, dir, &mut run)?;
    let picked: Vec<usize> = match (split, fold) {
        (Split::All, _) => (0..corpus.manifest.len()).collect(),
        (_, None) => return Err(Error::Config("checkpoint has no fold; use --split all".into())),
        (_, Some(f)) => {
            let plan_path = folds.map(Path::to_path_buf).unwrap_or_else(|| model_path.with_file_name("folds.csv"));
            let plan = read_fold_plan(&plan_path)?;
            if f >= plan.len() {
                return Err(Error::Config(format!("fold {f} not in {}", plan_path.display())));
            }
            if split == Split::Test {
                plan.test_indices(&corpus.manifest, f)
            } else {
                plan.train_indices(&corpus.manifest, f)
            }
        }
    };
    if picked.is_empty() {
        return Err(Error::Data("no utterances selected for evaluation".into()));
    }
    let waves: Vec<_> = picked.iter().map(|&i| corpus.waves[i].clone()).collect();
    let specs = pipeline::spectrograms(&waves, &cfg.stft()?, c.workers)?;
    let grids = pipeline::tokenize(&vq, &specs, c.workers)?;
    let labels: Vec<usize> = picked.iter().map(|&i| corpus.manifest.records[i].label).collect();
    let ev = evaluate(&model, &grids, &labels, &cfg.asl()?)?;
    let mut log = MetricsLog::default();
    let name = format!("{split:?}").to_lowercase();
    log.push(0, name.as_str(), ev.loss, ev.accuracy(), ev.macro_f1());
    log.write(run.path("metrics.csv"))?;
    run.write("confusion.csv", &ev.confusion.to_csv(&corpus.manifest.classes))?;
    let mut preds = String::from("utterance_id,label,predicted\n");
    for (&i, &p) in picked.iter().zip(&ev.predictions) {
        let r = &corpus.manifest.records[i];
        writeln!(preds, "{},{},{}", r.utterance_id, corpus.manifest.classes[r.label], corpus.manifest.classes[p]).unwrap();
    }
    run.write("predictions.csv", &preds)?;
    run.line(&format!("evaluate split={name} n={} acc={:.4} f1={:.4}", picked.len(), ev.accuracy(), ev.macro_f1()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(
    c: &Common,
    cfg: &Config,
    vq_path: &Path,
    mae_path: Option<&Path>,
    wav: Option<&Path>,
    dir: Option<&Path>,
    index: usize,
    seed: u64,
) -> Result<()> {
    let mut run = Run::create(c, "reconstruct", cfg)?;
    let vq = pipeline::load_vqvae(cfg, vq_path, c.force)?;
    let wave = match wav {
        Some(p) => load_wav(p)?,
        None => {
            let corpus = corpus(c, cfg, dir, &mut run)?;
            corpus.waves.get(index).cloned().ok_or_else(|| Error::Config(format!("corpus has no utterance {index}")))?
        }
    };
    let spec = crate::dsp::stft_power(&wave, &cfg.stft()?)?;
    let grid = vq.tokenize(&spec)?;
    let rec = vq.decode_indices(&grid)?;
    write_spec(&run, "original", &spec)?;
    write_spec(&run, "vqvae", &rec)?;
    run.line(&format!("reconstruct frames={} vqvae_log_mse={:.6}", spec.n_frames, log_mse(&spec, &rec)));
    if let Some(p) = mae_path {
        let mae = pipeline::load_mae(cfg, p, c.force)?;
        let (t, d, frames) = (mae.cfg.t, mae.cfg.d, mae.cfg.frames);
        let crop = crop_wrap(&grid, 0, frames);
        let tokens = patchify(&crop, t, d)?;
        let plan = make_mask(&tokens.geometry, cfg.strategy()?, cfg.mae_train()?.ratio, seed)?;
        let logits = mae.predict(&tokens, &plan)?;
        let filled = mae_reconstruct(&logits, &plan, &tokens)?;
        let masked_spec = vq.decode_indices(&filled)?;
        let reference = vq.decode_indices(&crop)?;
        write_spec(&run, "mae", &masked_spec)?;
        run.write("mask.txt", &plan.render_text(&tokens.geometry))?;
        let hits = plan
            .masked_indices()
            .iter()
            .map(|&n| tokens.token(n).iter().zip(unpatched_token(&filled, &tokens.geometry, n)).filter(|(a, b)| *a == b).count())
            .sum::<usize>();
        let slots = plan.num_masked() * tokens.geometry.token_len();
        run.line(&format!(
            "reconstruct mae masked={} index_acc={:.4} log_mse_vs_vqvae={:.6}",
            plan.num_masked(),
            hits as f64 / slots.max(1) as f64,
            log_mse(&reference, &masked_spec)
        ));
    }
    Ok(())
}

fn unpatched_token(grid: &QuantizedGrid, geo: &TokenGeometry, n: usize) -> Vec<usize> {
    let (i, j) = (n / geo.n_d, n % geo.n_d);
    let mut out = Vec::with_capacity(geo.token_len());
    for a in 0..geo.t {
        for b in 0..geo.d {
            out.push(grid.get(i * geo.t + a, j * geo.d + b));
        }
    }
    out
}

fn log_mse(a: &PowerSpectrogram, b: &PowerSpectrogram) -> f64 {
    let n = a.data.len().min(b.data.len());
    a.data[..n].iter().zip(&b.data[..n]).map(|(x, y)| (x.ln_1p() - y.ln_1p()).powi(2)).sum::<f64>() / n.max(1) as f64
}

fn write_spec(run: &Run, name: &str, spec: &PowerSpectrogram) -> Result<()> {
    write_file(run.path(&format!("{name}.pgm")), &spectrogram_pgm(spec))?;
    run.write(&format!("{name}.csv"), &spectrogram_csv(spec))
}

/// Masked cells of an `nt × nd` grid; frame masking covers whole rows.
pub fn mask_cells(strategy: MaskStrategy, ratio: f64, nt: usize, nd: usize, seed: u64) -> Result<Vec<bool>> {
    if nt == 0 || nd == 0 {
        return Err(Error::Config("--nt and --nd must be positive".into()));
    }
    let geo = if strategy == MaskStrategy::Frame { TokenGeometry::new(nt, nd, 1, nd)? } else { TokenGeometry::new(nt, nd, 1, 1)? };
    let plan = make_mask(&geo, strategy, ratio, seed)?;
    Ok((0..nt * nd).map(|cell| if strategy == MaskStrategy::Frame { plan.masked[cell / nd] } else { plan.masked[cell] }).collect())
}

fn inspect_mask(c: &Common, cfg: &Config, strategy: &str, ratio: f64, nt: usize, nd: usize, seed: u64) -> Result<()> {
    let strategy: MaskStrategy = strategy.parse()?;
    let cells = mask_cells(strategy, ratio, nt, nd, seed)?;
    let mut text = String::new();
    for row in cells.chunks(nd) {
        text.extend(row.iter().map(|&m| if m { '#' } else { '.' }));
        text.push('\n');
    }
    let masked = cells.iter().filter(|&&m| m).count();
    print!("{text}");
    println!("masked {masked} of {} cells", cells.len());
    let mut run = Run::create(c, "inspect-mask", cfg)?;
    run.write("mask.txt", &text)?;
    const SCALE: usize = 8;
    let mut px = Vec::with_capacity(cells.len() * SCALE * SCALE);
    for i in 0..nt * SCALE {
        for j in 0..nd * SCALE {
            px.push(if cells[(i / SCALE) * nd + j / SCALE] { 1.0 } else { 0.0 });
        }
    }
    write_file(run.path("mask.pgm"), &pgm_bytes(nd * SCALE, nt * SCALE, &px))?;
    run.line(&format!("inspect-mask strategy={strategy} ratio={ratio} nt={nt} nd={nd} seed={seed} masked={masked}"));
    Ok(())
}

fn sweep(c: &Common, cfg: &Config, axis: SweepAxis, dir: Option<&Path>, vq_path: Option<&Path>, dry_run: bool) -> Result<()> {
    let mut run = Run::create(c, &format!("sweep-{}", axis.name()), cfg)?;
    let points = sweep_points(axis);
    let configs: Vec<Config> = points
        .iter()
        .map(|p| {
            let mut pc = cfg.clone();
            let ov: Vec<String> = p.iter().map(|(k, v)| format!("{k}={v}")).collect();
            pc.apply_overrides(&ov)?;
            Ok(pc)
        })
        .collect::<Result<_>>()?;
    let header = "axis,strategy,ratio,e,depth,t,d,acc_mean,acc_std,f1_mean,f1_std\n";
    let mut csv = String::from(header);
    let describe = |pc: &Config| -> String {
        format!(
            "{},{},{},{},{},{},{}",
            axis.name(),
            pc.raw("tokens", "strategy"),
            pc.raw("tokens", "ratio"),
            pc.raw("tokens", "e"),
            pc.raw("mae", "depth"),
            pc.raw("tokens", "t"),
            pc.raw("tokens", "d")
        )
    };
    if dry_run {
        for pc in &configs {
            writeln!(csv, "{},,,,", describe(pc)).unwrap();
        }
        run.write("sweep.csv", &csv)?;
        run.line(&format!("sweep axis={} points={} dry_run", axis.name(), configs.len()));
        return Ok(());
    }
    let corpus = corpus(c, cfg, dir, &mut run)?;
    let specs = pipeline::spectrograms(&corpus.waves, &cfg.stft()?, c.workers)?;
    // one VQ-VAE (and token set) per distinct VQ-VAE configuration
    let mut vqs: Vec<(String, VqVae, Vec<QuantizedGrid>)> = Vec::new();
    if let Some(p) = vq_path {
        let vq = pipeline::load_vqvae(cfg, p, c.force)?;
        let grids = pipeline::tokenize(&vq, &specs, c.workers)?;
        vqs.push((cfg.fingerprint(ArtifactKind::VqVae), vq, grids));
    }
    for (i, pc) in configs.iter().enumerate() {
        let fp = pc.fingerprint(ArtifactKind::VqVae);
        if !vqs.iter().any(|(f, _, _)| *f == fp) {
            run.line(&format!("sweep point={i} training vqvae"));
            let (vq, _) = pipeline::train_vqvae(pc, &specs, &mut |_| {})?;
            let grids = pipeline::tokenize(&vq, &specs, c.workers)?;
            vqs.push((fp.clone(), vq, grids));
        }
        let (_, vq, grids) = vqs.iter().find(|(f, _, _)| *f == fp).expect("cached");
        let (mae, _) = pipeline::pretrain_mae(pc, vq, grids, &mut |_| {})?;
        let plan = pipeline::folds(pc, &corpus.manifest)?;
        let report = pipeline::cross_validate(pc, &mae, &corpus.manifest, grids, &plan, &mut |_, _| {})?;
        let ((am, asd), (fm, fsd)) = (report.accuracy(), report.macro_f1());
        writeln!(csv, "{},{am:.6},{asd:.6},{fm:.6},{fsd:.6}", describe(pc)).unwrap();
        run.line(&format!("sweep point={i} {} acc={am:.4} f1={fm:.4}", describe(pc)));
        run.write("sweep.csv", &csv)?;
    }
    run.write("sweep.csv", &csv)?;
    Ok(())
}
