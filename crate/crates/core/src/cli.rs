//! The `ntsimpute` command line.
//!
//! Every command writes `run_manifest.json` next to its outputs, recording
//! the resolved configuration, the dataset digest, the seed and the wall
//! clock. Config files are JSON; flags override values read from them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, MfConfig};
use crate::checkpoint;
use crate::data::{self, observed_view, write_atomic, NtsDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Predictions, ReportMetadata};
use crate::model::{self, ModelConfig};
use crate::rwr;
use crate::synth::{self, GenConfig};
use crate::train::{Setup, TrainConfig, Trainer};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TRAINING_LOG: &str = "training_log.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "ntsimpute", version, about = "Feature and edge imputation for networked time series")]
pub struct Cli {
    /// Worker threads; 1 is the determinism reference.
    #[arg(long, env = "NTS_THREADS", global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train the model on a dataset.
    Train(TrainArgs),
    /// Impute the validation and test ranges with a trained checkpoint.
    Impute(ImputeArgs),
    /// Score a predictions directory against held-out truth.
    Evaluate(EvaluateArgs),
    /// Run a reference imputer.
    Baseline(BaselineArgs),
    /// Aggregate metrics files into CSV, JSON and plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the training state in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// A training output directory or its checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Report file, e.g. `metrics.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the predictions directory name.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mean,
    Mf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// MF settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// One or more reports written by `evaluate`.
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset and predictions to plot from.
    #[arg(long, requires = "pred")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub pred: Option<PathBuf>,
    /// `node:feature` pairs to plot, at most four.
    #[arg(long, value_parser = parse_pair, num_args = 1..)]
    pub plot: Vec<(usize, usize)>,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected node:feature, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("bad index {x:?}"));
    Ok((p(a)?, p(b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub dataset_digest: Option<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the regular files of `dir` in name order, each as its name,
/// its length and its bytes.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    names.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != RUN_MANIFEST));
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let name = p.file_name().expect("file has a name").to_string_lossy();
        h.update(name.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn config_digest(config: &serde_json::Value) -> String {
    hex(&Sha256::digest(config.to_string().as_bytes()))
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    write_atomic(path, text.as_bytes())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn new_manifest(command: &str, config: serde_json::Value, digest: Option<String>, seed: Option<u64>, clock: Instant) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        config,
        dataset_digest: digest,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    }
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let clock = Instant::now();
    let mut cfg: GenConfig = load_or_default(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let g = synth::generate(&cfg)?;
    data::save_dataset(&g.dataset, &args.out)?;
    let digest = dataset_digest(&args.out)?;
    let m = new_manifest("generate", to_value(&cfg), Some(digest), Some(cfg.seed), clock);
    write_manifest(&args.out.join(RUN_MANIFEST), &m)
}

/// Resolves a `--model` argument to the directory holding the checkpoint.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.join(checkpoint::MANIFEST).is_file() {
        nested
    } else {
        path.to_path_buf()
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let clock = Instant::now();
    let dataset = data::load_dataset(&args.data)?;
    let digest = dataset_digest(&args.data)?;
    let ck_dir = args.out.join(CHECKPOINT_DIR);

    let mut trainer = if args.resume {
        let ck = checkpoint::load(&ck_dir)?;
        if ck.manifest.dataset_digest.as_deref() != Some(digest.as_str()) {
            return Err(Error::Config(format!(
                "{} was trained on a different dataset",
                args.out.display()
            )));
        }
        let state = checkpoint::load_state(&ck_dir, &ck)?;
        let mut train = ck.manifest.train.clone();
        if let Some(e) = args.epochs {
            train.epochs = e;
        }
        let setup = Setup::with_anchors(&dataset, &ck.manifest.model, &train, ck.manifest.anchors.clone())?;
        let mut trainer = Trainer::resume(&dataset, setup, state)?;
        if args.epochs.is_some() {
            trainer.state.stopped = false;
        }
        trainer
    } else {
        if is_nonempty_dir(&args.out) {
            return Err(Error::Config(format!(
                "output directory {} already exists; pass --resume to continue it",
                args.out.display()
            )));
        }
        let model: ModelConfig = load_or_default(args.model_config.as_deref())?;
        let mut train: TrainConfig = load_or_default(args.train_config.as_deref())?;
        if let Some(s) = args.seed {
            train.seed = Some(s);
        }
        if train.seed.is_none() {
            train.seed = Some(rand::random());
        }
        if let Some(e) = args.epochs {
            train.epochs = e;
        }
        Trainer::new(&dataset, Setup::new(&dataset, &model, &train)?)?
    };

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let log_path = args.out.join(TRAINING_LOG);
    let save = |tr: &Trainer| -> Result<()> {
        checkpoint::save(&ck_dir, &tr.setup, &tr.state, Some(&digest), true)?;
        let log = serde_json::to_string_pretty(&tr.state.log).expect("log serializes");
        write_atomic(&log_path, log.as_bytes())
    };
    save(&trainer)?;
    trainer.fit(|tr, rec| {
        eprintln!(
            "epoch {:>4}  lr {:.2e}  loss {:.5}  val mae {:.5}  val frob {:.4}  {:.1}s",
            rec.epoch, rec.lr, rec.loss_total, rec.val_mae, rec.val_frob, rec.seconds
        );
        save(tr)
    })?;
    let config = serde_json::json!({
        "model": trainer.setup.model,
        "train": trainer.setup.train,
        "dims": trainer.setup.dims,
        "anchors": trainer.setup.positions.anchors,
        "resumed": args.resume,
    });
    let m = new_manifest("train", config, Some(digest), Some(trainer.setup.seed), clock);
    write_manifest(&args.out.join(RUN_MANIFEST), &m)
}

pub fn cmd_impute(args: &ImputeArgs) -> Result<()> {
    let clock = Instant::now();
    let dataset = data::load_dataset(&args.data)?;
    let digest = dataset_digest(&args.data)?;
    let ck = checkpoint::load(&checkpoint_dir(&args.model))?;
    let mf = &ck.manifest;
    let (n, d) = (dataset.num_nodes(), dataset.num_features());
    if mf.num_nodes != n || mf.dims.num_features != d {
        return Err(Error::Config(format!(
            "checkpoint expects {} nodes and {} features, dataset has {n} and {d}",
            mf.num_nodes, mf.dims.num_features
        )));
    }
    if mf.window > dataset.num_steps() {
        return Err(Error::Config(format!(
            "checkpoint window {} exceeds the dataset length {}",
            mf.window,
            dataset.num_steps()
        )));
    }
    let view = observed_view(&dataset);
    let positions = rwr::position_tensor(&view.obs_adjacency, &mf.model.rwr(n), &mf.anchors)?;
    let range = dataset.split.train_end..dataset.num_steps();
    let preds = model::impute_range(&ck.params, &mf.dims, &view, &positions, range, mf.window)?;
    preds.write(&args.out)?;
    let config = serde_json::json!({
        "checkpoint": to_value(mf),
        "range": [preds.start, preds.range().end],
    });
    let m = new_manifest("impute", config, Some(digest), Some(mf.seed), clock);
    write_manifest(&args.out.join(RUN_MANIFEST), &m)
}

pub fn cmd_baseline(args: &BaselineArgs) -> Result<()> {
    let clock = Instant::now();
    let dataset = data::load_dataset(&args.data)?;
    let digest = dataset_digest(&args.data)?;
    let view = observed_view(&dataset);
    let (features, config, seed) = match args.method {
        Method::Mean => {
            let f = baselines::mean_impute(&view, dataset.range(Split::Train))?;
            (f, serde_json::json!({ "method": "mean" }), None)
        }
        Method::Mf => {
            let mut cfg: MfConfig = load_or_default(args.config.as_deref())?;
            if let Some(r) = args.rank {
                cfg.rank = r;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            let fit = baselines::mf_impute(&view, &cfg)?;
            (fit.features, serde_json::json!({ "method": "mf", "mf": cfg }), Some(cfg.seed))
        }
    };
    let adjacency = baselines::edge_mean_impute(&view);
    let range = dataset.split.train_end..dataset.num_steps();
    Predictions::from_full(&features, &adjacency, range).write(&args.out)?;
    let m = new_manifest("baseline", config, Some(digest), seed, clock);
    write_manifest(&args.out.join(RUN_MANIFEST), &m)
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    out.with_file_name(name)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let clock = Instant::now();
    let dataset = data::load_dataset(&args.data)?;
    let digest = dataset_digest(&args.data)?;
    let (t, n, d) = dataset.features.dim();
    let preds = Predictions::read(&args.pred, t, n, d)?;
    let mut metadata = ReportMetadata::default();
    let pm = args.pred.join(RUN_MANIFEST);
    if pm.is_file() {
        let m = RunManifest::read(&pm)?;
        metadata.seed = m.seed;
        metadata.config_digest = Some(config_digest(&m.config));
        if m.dataset_digest.as_deref().is_some_and(|x| x != digest) {
            metadata.warnings.push("predictions were made from a different dataset".into());
        }
    }
    let run_id = match &args.run_id {
        Some(r) => r.clone(),
        None => args
            .pred
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
    };
    let report = eval::evaluate(&dataset, &preds, &run_id, metadata)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    eval::write_report(&report, &args.out)?;
    let config = serde_json::json!({ "pred": args.pred, "run_id": run_id });
    let m = new_manifest("evaluate", config, Some(digest), report.metadata.seed, clock);
    write_manifest(&sibling_manifest(&args.out), &m)
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let clock = Instant::now();
    if args.plot.len() > eval::MAX_PLOTS {
        return Err(Error::Config(format!("at most {} plots", eval::MAX_PLOTS)));
    }
    let reports: Vec<_> = args.metrics.iter().map(|p| eval::read_report(p)).collect::<Result<_>>()?;
    let loaded: Option<(NtsDataset, Predictions)> = match (&args.data, &args.pred) {
        (Some(dd), Some(pd)) => {
            let ds = data::load_dataset(dd)?;
            let (t, n, d) = ds.features.dim();
            let preds = Predictions::read(pd, t, n, d)?;
            Some((ds, preds))
        }
        _ => None,
    };
    let default_pairs = [(0, 0)];
    let pairs: &[(usize, usize)] = if args.plot.is_empty() { &default_pairs } else { &args.plot };
    let plots = loaded.as_ref().map(|(ds, preds)| eval::PlotInput {
        dataset: ds,
        preds,
        pairs,
    });
    eval::emit_report(&reports, &args.out, plots)?;
    let config = serde_json::json!({ "metrics": args.metrics, "plot": args.plot });
    let digest = args.data.as_deref().map(dataset_digest).transpose()?;
    let m = new_manifest("report", config, digest, None, clock);
    write_manifest(&args.out.join(RUN_MANIFEST), &m)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // a second call in the same process fails; the first pool stays
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Entry point for the binary: parses `std::env::args`, runs the command and
/// returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
