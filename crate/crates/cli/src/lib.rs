//! Command-line workflow: ingest → make-toy → train-ae → train-diff → sample → eval.

pub mod checkpoint;
pub mod config;
pub mod props;
pub mod toy;
pub mod xyz;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lmdm_core::autodiff::ParamStore;
use lmdm_core::autoencoder::AeModel;
use lmdm_core::diffusion::NoiseSchedule;
use lmdm_core::elements::ElementVocab;
use lmdm_core::geometry::{pairwise_distances, Molecule};
use lmdm_core::metrics::{corpus_hashes, set_metrics, ChemistryTables};
use lmdm_core::sampler::{histogram, sample_molecules, NodeCountSource, SampleConfig, SampleModels};
use lmdm_core::score_network::DualScoreModel;
use lmdm_core::selftest;
use lmdm_core::trainer::{encoder_checksum, train_autoencoder, train_diffusion, LogRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use checkpoint::{Checkpoint, CheckpointStage, NamedArray};
use config::RunConfig;
use props::Sidecar;
use toy::{make_toy_dataset, ToyKind};
use xyz::{format_xyz, read_xyz_blocks, XyzBlock};

/// Atoms closer than this (Å) make a structure degenerate.
pub const MIN_SEPARATION: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "lmdm", version, about = "Latent molecular diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// key = value config file; documented defaults otherwise
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set k=2`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus and write it centred
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Property sidecar to filter alongside the corpus
        #[arg(long, requires = "props_out")]
        props: Option<PathBuf>,
        #[arg(long, requires = "props")]
        props_out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic chain/ring dataset
    MakeToy {
        #[arg(long, value_parser = ["chains", "rings", "mixed"])]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Repeat every molecule this many times
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Stage one: train the autoencoder
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// JSON-lines training log
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage two: train the score network on frozen encoder latents
    TrainDiff {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        props: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw molecules and write them as XYZ
    Sample {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Fixed atom count; the training histogram otherwise
        #[arg(long)]
        atoms: Option<usize>,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Raw property targets, comma-separated
        #[arg(long, value_delimiter = ',')]
        cond: Option<Vec<f64>>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score generated molecules against a reference corpus
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Append the report as one JSON line
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the built-in property checks
    Selftest,
}

/// Parses `argv` (program name first) and runs it. Returns the exit status:
/// 0 success, 1 runtime failure, 2 usage error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, output, props, props_out, cfg } => {
            ingest(&input, &output, props.as_deref().zip(props_out.as_deref()), &resolve(&cfg, None)?)
        }
        Command::MakeToy { kind, n, seed, copies, output } => make_toy(kind.parse()?, n, seed, copies, &output),
        Command::TrainAe { data, output, log, cfg } => train_ae(&data, &output, log.as_deref(), &resolve(&cfg, None)?),
        Command::TrainDiff { data, ae, output, props, log, cfg } => {
            let ae_ckpt = Checkpoint::read(&ae).context("loading autoencoder checkpoint")?;
            let cfg = resolve(&cfg, Some(&ae_ckpt))?;
            train_diff(&data, &ae_ckpt, &output, props.as_deref(), log.as_deref(), &cfg)
        }
        Command::Sample { ae, diffusion, output, n, atoms, seed, cond, cfg } => {
            let ae_ckpt = Checkpoint::read(&ae).context("loading autoencoder checkpoint")?;
            let diff_ckpt = Checkpoint::read(&diffusion).context("loading diffusion checkpoint")?;
            let mut cfg = resolve(&cfg, Some(&diff_ckpt))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            sample(&ae_ckpt, &diff_ckpt, &output, n, atoms, cond, &cfg)
        }
        Command::Eval { generated, reference, records, cfg } => {
            evaluate(&generated, &reference, records.as_deref(), &resolve(&cfg, None)?)
        }
        Command::Selftest => run_selftest(),
    }
}

/// Config file (or, failing that, the checkpoint snapshot, or defaults)
/// with `--set` overrides applied.
fn resolve(args: &ConfigArgs, snapshot: Option<&Checkpoint>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, snapshot) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(c)) => RunConfig::parse(&c.config).context("checkpoint config snapshot")?,
        (None, None) => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn block_name(i: usize, b: &XyzBlock) -> String {
    let c = b.comment.trim();
    if c.is_empty() {
        format!("mol_{i}")
    } else {
        c.to_string()
    }
}

fn load_corpus(path: &Path, cfg: &RunConfig) -> Result<(Vec<String>, Vec<Molecule<f64>>)> {
    let blocks = read_xyz_blocks(path, &cfg.vocab()?)?;
    if blocks.is_empty() {
        bail!("{}: no molecules", path.display());
    }
    let names = blocks.iter().enumerate().map(|(i, b)| block_name(i, b)).collect();
    Ok((names, blocks.into_iter().map(|b| b.molecule).collect()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| path.display().to_string())
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| path.display().to_string())?);
    for r in log {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

fn init_rng(seed: u64, stage: CheckpointStage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stage {
        CheckpointStage::Ae => 101,
        CheckpointStage::Diffusion => 102,
    });
    rng
}

fn ingest(input: &Path, output: &Path, sidecar: Option<(&Path, &Path)>, cfg: &RunConfig) -> Result<()> {
    let blocks = read_xyz_blocks(input, &cfg.vocab()?)?;
    let mut names = Vec::with_capacity(blocks.len());
    let mut mols = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        let name = block_name(i, b);
        let d = pairwise_distances(&b.molecule.coords)?;
        let n = b.molecule.n_atoms();
        if (0..n).any(|a| (a + 1..n).any(|c| d.get(a, c) < MIN_SEPARATION)) {
            bail!("molecule {i} ({name}): atoms closer than {MIN_SEPARATION} Å");
        }
        if names.contains(&name) {
            bail!("molecule {i}: duplicate name {name:?}");
        }
        mols.push(b.molecule.centered()?);
        names.push(name);
    }
    write_text(output, &format_xyz(names.iter().map(String::as_str).zip(&mols)))?;
    if let Some((src, dst)) = sidecar {
        let side = Sidecar::read(src)?;
        let rows = side.select(&names, &side.columns)?;
        Sidecar { columns: side.columns.clone(), rows: names.iter().cloned().zip(rows).collect() }.write(dst)?;
    }
    println!("ingested {} molecules", mols.len());
    Ok(())
}

fn make_toy(kind: ToyKind, n: usize, seed: u64, copies: usize, output: &Path) -> Result<()> {
    if copies == 0 {
        bail!("--copies must be at least 1");
    }
    let base = make_toy_dataset(kind, n, seed)?;
    let mut names = Vec::new();
    let mut mols = Vec::new();
    for c in 0..copies {
        for (i, m) in base.iter().enumerate() {
            names.push(if copies == 1 { format!("toy_{i}") } else { format!("toy_{i}_{c}") });
            mols.push(m.clone());
        }
    }
    write_text(output, &format_xyz(names.iter().map(String::as_str).zip(&mols)))?;
    println!("wrote {} molecules", mols.len());
    Ok(())
}

fn train_ae(data: &Path, output: &Path, log: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (_, mols) = load_corpus(data, cfg)?;
    let mut store = ParamStore::new();
    let model = AeModel::new(&mut store, cfg.ae_config(), &mut init_rng(cfg.seed, CheckpointStage::Ae));
    let mut tcfg = cfg.train_config();
    tcfg.max_steps = cfg.ae_budget();
    let out = train_autoencoder(&mols, &model, store, &tcfg)?;
    if let Some(p) = log {
        write_log(p, &out.log)?;
    }
    Checkpoint {
        stage: CheckpointStage::Ae,
        seed: cfg.seed,
        config: cfg.to_text(),
        arrays: Checkpoint::params_to_arrays(&out.store),
    }
    .write(output)?;
    println!("autoencoder: {} steps, stop {:?}", out.steps_run, out.stop);
    Ok(())
}

/// Rebuilds the autoencoder recorded in `ckpt`; `cfg` must agree on every
/// shape-determining key.
pub fn load_ae(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<(AeModel, ParamStore<f64>)> {
    ckpt.expect_stage(CheckpointStage::Ae)?;
    let snap = RunConfig::parse(&ckpt.config).context("autoencoder config snapshot")?;
    cfg.check_compatible(&snap, false)?;
    let mut store = ParamStore::new();
    let model = AeModel::new(&mut store, cfg.ae_config(), &mut init_rng(0, CheckpointStage::Ae));
    ckpt.load_params(&mut store, "")?;
    Ok((model, store))
}

fn checksum_array(sum: u64) -> NamedArray {
    NamedArray::vector("meta.ae_checksum", vec![(sum >> 32) as f64, (sum & 0xffff_ffff) as f64])
}

fn train_diff(data: &Path, ae_ckpt: &Checkpoint, output: &Path, props: Option<&Path>, log: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (ae, ae_store) = load_ae(ae_ckpt, cfg)?;
    let (names, mols) = load_corpus(data, cfg)?;
    let cond = match (cfg.cond_properties.is_empty(), props) {
        (true, _) => None,
        (false, Some(p)) => Some(Sidecar::read(p)?.select(&names, &cfg.cond_properties)?),
        (false, None) => bail!("cond_properties is set but no --props sidecar was given"),
    };
    let mut store = ParamStore::new();
    let model = DualScoreModel::new(&mut store, cfg.score_config(), &mut init_rng(cfg.seed, CheckpointStage::Diffusion));
    let mut tcfg = cfg.train_config();
    tcfg.max_steps = cfg.diffusion_budget();
    let out = train_diffusion(&mols, cond.as_deref(), &ae, &ae_store, &model, store, &tcfg)?;
    if let Some(p) = log {
        write_log(p, &out.train.log)?;
    }
    let hist: Vec<f64> = histogram(&mols).into_iter().flat_map(|(n, c)| [n as f64, c as f64]).collect();
    let mut arrays = Checkpoint::params_to_arrays(&out.train.store);
    arrays.push(NamedArray { name: "meta.node_hist".into(), dims: vec![hist.len() as u64 / 2, 2], values: hist });
    arrays.push(NamedArray::vector("meta.cond_mean", out.cond_mean.clone()));
    arrays.push(NamedArray::vector("meta.cond_std", out.cond_std.clone()));
    arrays.push(checksum_array(encoder_checksum(&ae_store)));
    Checkpoint { stage: CheckpointStage::Diffusion, seed: cfg.seed, config: cfg.to_text(), arrays }.write(output)?;
    println!("diffusion: {} steps, stop {:?}", out.train.steps_run, out.train.stop);
    Ok(())
}

fn meta<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a NamedArray> {
    ckpt.array(name).ok_or_else(|| anyhow!("diffusion checkpoint lacks {name}"))
}

/// Both stages restored from their checkpoints, ready to sample.
pub struct Loaded {
    pub config: RunConfig,
    pub ae: AeModel,
    pub ae_store: ParamStore<f64>,
    pub score: DualScoreModel,
    pub score_store: ParamStore<f64>,
    pub sched: NoiseSchedule,
    pub vocab: ElementVocab,
    pub node_hist: BTreeMap<usize, u64>,
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
}

impl Loaded {
    /// Fails when `cfg` disagrees with either snapshot on a shape key or the
    /// diffusion checkpoint was trained on a different encoder.
    pub fn new(ae_ckpt: &Checkpoint, diff_ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        diff_ckpt.expect_stage(CheckpointStage::Diffusion)?;
        let snap = RunConfig::parse(&diff_ckpt.config).context("diffusion config snapshot")?;
        cfg.check_compatible(&snap, true)?;
        let (ae, ae_store) = load_ae(ae_ckpt, cfg)?;
        if meta(diff_ckpt, "meta.ae_checksum")?.values != checksum_array(encoder_checksum(&ae_store)).values {
            bail!("diffusion checkpoint was trained against a different autoencoder");
        }
        let mut score_store = ParamStore::new();
        let score = DualScoreModel::new(&mut score_store, cfg.score_config(), &mut init_rng(0, CheckpointStage::Diffusion));
        diff_ckpt.load_params(&mut score_store, "score.")?;
        Ok(Self {
            config: cfg.clone(),
            ae,
            ae_store,
            score,
            score_store,
            sched: cfg.diffusion_config().schedule()?,
            vocab: cfg.vocab()?,
            node_hist: meta(diff_ckpt, "meta.node_hist")?.values.chunks_exact(2).map(|p| (p[0] as usize, p[1] as u64)).collect(),
            cond_mean: meta(diff_ckpt, "meta.cond_mean")?.values.clone(),
            cond_std: meta(diff_ckpt, "meta.cond_std")?.values.clone(),
        })
    }

    pub fn models(&self) -> SampleModels<'_, f64> {
        SampleModels {
            ae: &self.ae,
            ae_store: &self.ae_store,
            score: &self.score,
            score_store: &self.score_store,
            sched: &self.sched,
            vocab: &self.vocab,
            cond_mean: &self.cond_mean,
            cond_std: &self.cond_std,
        }
    }

    /// Sampling settings taken from the config; the histogram when `atoms` is absent.
    pub fn sample_config(&self, n: usize, atoms: Option<usize>, cond: Option<Vec<f64>>) -> SampleConfig {
        let node_count = atoms.map_or_else(|| NodeCountSource::Histogram(self.node_hist.clone()), NodeCountSource::Fixed);
        let mut scfg = SampleConfig::new(n, node_count, self.config.seed);
        scfg.var_noise_source = self.config.var_noise_source;
        scfg.sigma_mode = self.config.sigma_mode;
        scfg.cond = cond;
        scfg
    }
}

fn sample(
    ae_ckpt: &Checkpoint,
    diff_ckpt: &Checkpoint,
    output: &Path,
    n: usize,
    atoms: Option<usize>,
    cond: Option<Vec<f64>>,
    cfg: &RunConfig,
) -> Result<()> {
    let loaded = Loaded::new(ae_ckpt, diff_ckpt, cfg)?;
    let out = sample_molecules(&loaded.models(), &loaded.sample_config(n, atoms, cond))?;
    let names: Vec<String> = out.indices.iter().map(|i| format!("sample_{i}")).collect();
    write_text(output, &format_xyz(names.iter().map(String::as_str).zip(&out.molecules)))?;
    for (i, why) in &out.rejected {
        eprintln!("sample {i} rejected: {why}");
    }
    println!("sampled {} molecules, {} rejected", out.molecules.len(), out.rejected.len());
    Ok(())
}

fn evaluate(generated: &Path, reference: &Path, records: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let vocab = cfg.vocab()?;
    let gen = xyz::read_xyz(generated, &vocab)?;
    let (_, refs) = load_corpus(reference, cfg)?;
    let tables = ChemistryTables::default();
    let report = set_metrics(&gen, &corpus_hashes(&refs, &tables)?, &tables, cfg.require_connected)?;
    print!("{}", report.table());
    if let Some(p) = records {
        let line = json!({
            "generated": generated.display().to_string(),
            "reference": reference.display().to_string(),
            "report": report,
        });
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p).with_context(|| p.display().to_string())?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn run_selftest() -> Result<()> {
    let results = selftest::run_all();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}
