//! Command-line entry point.
//!
//! Every command writes its artifacts under a run directory with fixed file
//! names and records itself in `manifest.json`, including the fully resolved
//! argument list so `herdid replay` can re-run it.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::cluster::{self, Pooling, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::head::ProjectionHead;
use crate::objective::LossVariant;
use crate::parallel::{self, Exec};
use crate::seed::{stage_seed, Stage};
use crate::simulate::{self, SimConfig};
use crate::store::{self, EmbeddingDataset};
use crate::train::{self, SupervisedConfig, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.herdckp";
pub const LOG_FILE: &str = "train.log.jsonl";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "HERDID_THREADS";

#[derive(Debug, Parser)]
#[command(name = "herdid", version, about = "Self-supervised animal identity clustering")]
pub struct Cli {
    /// Single-threaded execution; outputs are bit-identical across re-runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic HERDEMB1 dataset with known identities.
    Simulate(SimulateArgs),
    /// Train the projection head (self-supervised, or the supervised baseline).
    Train(TrainArgs),
    /// Embed every detection and cluster into identities.
    Cluster(ClusterArgs),
    /// Score cluster assignments against ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Simulate or load, then train, cluster and evaluate in one go.
    Pipeline(PipelineArgs),
    /// Re-run the commands recorded in a manifest and compare checksums.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimFlags {
    /// Number of identities.
    #[arg(long = "ids", default_value_t = 10, value_parser = clap::value_parser!(u32).range(2..))]
    pub ids: u32,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(2..))]
    pub frames: u64,
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u32).range(1..))]
    pub dim: u32,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(2..))]
    pub views: u32,
    /// Per-frame appearance drift (standard deviation per component).
    #[arg(long, default_value_t = 0.05)]
    pub identity_noise: f64,
    /// Per-view augmentation noise (standard deviation per component).
    #[arg(long, default_value_t = 0.1)]
    pub view_noise: f64,
    /// Probability that an identity is visible in a frame.
    #[arg(long, default_value_t = 0.9)]
    pub visibility: f64,
}

impl SimFlags {
    fn config(&self, seed: u64) -> SimConfig {
        SimConfig {
            n_identities: self.ids,
            n_frames: self.frames,
            embedding_dim: self.dim as usize,
            views_per_detection: self.views as usize,
            identity_noise_sigma: self.identity_noise,
            view_noise_sigma: self.view_noise,
            visibility_prob: self.visibility,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sim: SimFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output HERDEMB1 file.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Bce,
    Supcon,
    SupconLearnable,
}

impl From<LossArg> for LossVariant {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Bce => LossVariant::Bce,
            LossArg::Supcon => LossVariant::SupconFixed,
            LossArg::SupconLearnable => LossVariant::SupconLearnable,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, value_enum, default_value_t = LossArg::Bce)]
    pub loss: LossArg,
    /// Fixed temperature for `--loss supcon`.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub epochs: u32,
    /// Frames per batch (K).
    #[arg(short = 'k', long = "frames-per-batch", default_value_t = 2, value_parser = clap::value_parser!(u32).range(2..))]
    pub frames_per_batch: u32,
    /// Report progress every this many steps (0 = never).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SupervisedFlags {
    /// Train the cross-entropy baseline instead (needs labels).
    #[arg(long)]
    pub supervised: bool,
    #[arg(long, default_value_t = 1000)]
    pub train_frames: usize,
    #[arg(long, default_value_t = 200)]
    pub val_frames: usize,
    #[arg(long, default_value_t = train::DEFAULT_PATIENCE)]
    pub patience: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub supervised: SupervisedFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Mean,
    PerView,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterFlags {
    /// Override the identity count from the dataset header.
    #[arg(long = "ids")]
    pub ids: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    pub restarts: usize,
    #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
    pub pooling: PoolingArg,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// Checkpoint; defaults to `<output>/checkpoint.herdckp`.
    #[arg(short, long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub cluster: ClusterFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// Assignments CSV; defaults to `<output>/assignments.csv`.
    #[arg(short, long)]
    pub assignments: Option<PathBuf>,
    #[arg(long = "ids")]
    pub ids: Option<u32>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Existing dataset; when absent the simulator flags are used.
    #[arg(short, long, conflicts_with_all = ["frames", "dim", "views"])]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub sim: SimFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    pub restarts: usize,
    #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
    pub pooling: PoolingArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Directory for the replayed artifacts.
    #[arg(short, long)]
    pub output: PathBuf,
}

/// One command's entry in a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved argument list (without the program name).
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub deterministic: bool,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 of every input and output file, keyed by path.
    pub checksums: std::collections::BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub runs: Vec<RunManifest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

struct Recorder {
    command: &'static str,
    argv: Vec<String>,
    deterministic: bool,
    started: Instant,
    started_unix: u64,
}

impl Recorder {
    fn new(command: &'static str, argv: Vec<String>, deterministic: bool) -> Self {
        Self {
            command,
            argv,
            deterministic,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    fn finish(
        self,
        manifest_path: &Path,
        config: serde_json::Value,
        seed: u64,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<()> {
        let mut checksums = std::collections::BTreeMap::new();
        for p in inputs.iter().chain(&outputs) {
            checksums.insert(p.display().to_string(), sha256_file(p)?);
        }
        let entry = RunManifest {
            command: self.command.to_string(),
            argv: self.argv,
            config,
            seed,
            deterministic: self.deterministic,
            inputs,
            outputs,
            checksums,
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut file: ManifestFile = match fs::read(manifest_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
            Err(_) => ManifestFile::default(),
        };
        file.runs.retain(|r| r.command != entry.command);
        file.runs.push(entry);
        fs::write(manifest_path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }
}

fn exec_for(deterministic: bool) -> Exec {
    if deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn resolve_identities(dataset: &EmbeddingDataset, override_ids: Option<u32>) -> Result<usize> {
    match override_ids.or(dataset.n_identities()) {
        Some(0) => Err(Error::Config("identity count must be >= 1".into())),
        Some(n) => Ok(n as usize),
        None => Err(Error::Config("dataset does not record the identity count; pass --ids".into())),
    }
}

fn pooling(p: PoolingArg) -> Pooling {
    match p {
        PoolingArg::Mean => Pooling::Mean,
        PoolingArg::PerView => Pooling::PerView,
    }
}

fn train_config(flags: &TrainFlags, seed: u64, exec: Exec) -> TrainConfig {
    TrainConfig {
        epochs: flags.epochs as usize,
        frames_per_batch: flags.frames_per_batch as usize,
        loss: flags.loss.into(),
        tau: flags.tau,
        seed: stage_seed(seed, Stage::Sampler),
        eval_every: flags.eval_every,
        exec,
    }
}

/// Self-supervised training with the seeds derived from `seed`.
fn run_selfsup(dataset: &EmbeddingDataset, flags: &TrainFlags, seed: u64, exec: Exec) -> Result<(Checkpoint, Vec<train::LogRecord>)> {
    let mut head = ProjectionHead::<f32>::init(dataset.dim(), stage_seed(seed, Stage::HeadInit))?;
    let config = train_config(flags, seed, exec);
    let outcome = train::train_selfsup_with_monitor(dataset.unlabeled(), &mut head, &config, |step, _| {
        eprintln!("step {step}");
    })?;
    if let Some(last) = outcome.log.last() {
        eprintln!("trained {} steps, final loss {:.5}, t {:.3}, b {:.3}", last.step + 1, last.loss, last.t, last.b);
    }
    let ckpt = Checkpoint { head, loss: Some(outcome.loss_params), optim: outcome.optim, classifier: None };
    Ok((ckpt, outcome.log))
}

fn cmd_simulate(args: &SimulateArgs, rec: Recorder) -> Result<()> {
    let config = args.sim.config(stage_seed(args.seed, Stage::Simulate));
    let dataset = simulate::generate_with(&config, exec_for(rec.deterministic))?;
    if let Some(dir) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let bytes = store::write_path(&dataset, &args.output)?;
    eprintln!("wrote {} detections ({bytes} bytes) to {}", dataset.len(), args.output.display());
    rec.finish(
        &store::manifest_sidecar(&args.output),
        serde_json::to_value(&config)?,
        args.seed,
        vec![],
        vec![args.output.clone()],
    )
}

fn cmd_train(args: &TrainArgs, rec: Recorder) -> Result<()> {
    let dataset = store::read_path(&args.input)?;
    ensure_dir(&args.output)?;
    let exec = exec_for(rec.deterministic);
    let ckpt_path = args.output.join(CHECKPOINT_FILE);
    let log_path = args.output.join(LOG_FILE);
    let config_json = if args.supervised.supervised {
        let config = SupervisedConfig {
            max_epochs: args.train.epochs as usize,
            frames_per_batch: args.train.frames_per_batch as usize,
            seed: stage_seed(args.seed, Stage::Sampler),
            train_frames: args.supervised.train_frames,
            val_frames: args.supervised.val_frames,
            patience: args.supervised.patience,
        };
        let mut head = ProjectionHead::<f32>::init(dataset.dim(), stage_seed(args.seed, Stage::HeadInit))?;
        let outcome = train::train_supervised(&dataset, &mut head, &config)?;
        eprintln!(
            "best epoch {} of {}, test accuracy {:.4}",
            outcome.best_epoch,
            outcome.history.len(),
            outcome.test_accuracy()?
        );
        let mut log = fs::File::create(&log_path)?;
        for rec in &outcome.history {
            serde_json::to_writer(&mut log, rec)?;
            std::io::Write::write_all(&mut log, b"\n")?;
        }
        checkpoint::save(
            &Checkpoint { head: outcome.head, loss: None, optim: outcome.optim, classifier: Some(outcome.classifier) },
            &ckpt_path,
        )?;
        serde_json::json!({ "supervised": config, "splits": outcome.splits })
    } else {
        let (ckpt, log) = run_selfsup(&dataset, &args.train, args.seed, exec)?;
        train::write_log(&log, std::io::BufWriter::new(fs::File::create(&log_path)?))?;
        checkpoint::save(&ckpt, &ckpt_path)?;
        serde_json::to_value(train_config(&args.train, args.seed, exec))?
    };
    rec.finish(
        &args.output.join(MANIFEST_FILE),
        config_json,
        args.seed,
        vec![args.input.clone()],
        vec![ckpt_path, log_path],
    )
}

fn cluster_and_write(
    dataset: &EmbeddingDataset,
    head: &ProjectionHead<f32>,
    flags: &ClusterFlags,
    seed: u64,
    exec: Exec,
    out: &Path,
) -> Result<Vec<usize>> {
    let k = resolve_identities(dataset, flags.ids)?;
    let result = cluster::cluster_detections(
        dataset,
        head,
        k,
        stage_seed(seed, Stage::KMeans),
        flags.restarts,
        pooling(flags.pooling),
        exec,
    )?;
    eprintln!("k-means inertia {:.6} after {} iterations", result.inertia, result.iterations);
    let rows = cluster::assignment_rows(dataset, &result.assignments);
    cluster::write_assignments_csv(&rows, std::io::BufWriter::new(fs::File::create(out)?))?;
    Ok(result.assignments)
}

fn cmd_cluster(args: &ClusterArgs, rec: Recorder) -> Result<()> {
    let dataset = store::read_path(&args.input)?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| args.output.join(CHECKPOINT_FILE));
    let ckpt = checkpoint::load(&ckpt_path)?;
    ensure_dir(&args.output)?;
    let out = args.output.join(ASSIGNMENTS_FILE);
    cluster_and_write(&dataset, &ckpt.head, &args.cluster, args.seed, exec_for(rec.deterministic), &out)?;
    rec.finish(
        &args.output.join(MANIFEST_FILE),
        serde_json::json!({
            "ids": args.cluster.ids,
            "restarts": args.cluster.restarts,
            "pooling": pooling(args.cluster.pooling),
            "kmeans_seed": stage_seed(args.seed, Stage::KMeans),
        }),
        args.seed,
        vec![args.input.clone(), ckpt_path],
        vec![out],
    )
}

fn evaluate_and_write(dataset: &EmbeddingDataset, assignments: &[usize], k: usize, out: &Path) -> Result<EvalReport> {
    if !dataset.has_labels() {
        return Err(Error::Coverage("dataset has no ground-truth labels".into()));
    }
    let report = eval::evaluate(assignments, &dataset.labels(), k)?;
    fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    print!("{report}");
    Ok(report)
}

fn cmd_evaluate(args: &EvaluateArgs, rec: Recorder) -> Result<()> {
    let dataset = store::read_path(&args.input)?;
    let csv_path = args.assignments.clone().unwrap_or_else(|| args.output.join(ASSIGNMENTS_FILE));
    let rows = cluster::read_assignments_csv(fs::File::open(&csv_path)?)?;
    let lookup: std::collections::HashMap<(u64, u32), usize> =
        rows.iter().map(|r| ((r.frame_id, r.detection_idx), r.cluster)).collect();
    let assignments = dataset
        .records()
        .iter()
        .map(|r| {
            lookup.get(&(r.frame_id, r.detection_idx)).copied().ok_or_else(|| {
                Error::Coverage(format!("no assignment for detection ({}, {})", r.frame_id, r.detection_idx))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = resolve_identities(&dataset, args.ids)?;
    ensure_dir(&args.output)?;
    let out = args.output.join(REPORT_FILE);
    evaluate_and_write(&dataset, &assignments, k, &out)?;
    rec.finish(
        &args.output.join(MANIFEST_FILE),
        serde_json::json!({ "ids": k }),
        0,
        vec![args.input.clone(), csv_path],
        vec![out],
    )
}

fn cmd_pipeline(args: &PipelineArgs, rec: Recorder) -> Result<()> {
    let exec = exec_for(rec.deterministic);
    let (dataset, inputs, sim_config) = match &args.input {
        Some(path) => (store::read_path(path)?, vec![path.clone()], None),
        None => {
            let config = args.sim.config(stage_seed(args.seed, Stage::Simulate));
            (simulate::generate_with(&config, exec)?, vec![], Some(config))
        }
    };
    ensure_dir(&args.output)?;
    let ckpt_path = args.output.join(CHECKPOINT_FILE);
    let log_path = args.output.join(LOG_FILE);
    let csv_path = args.output.join(ASSIGNMENTS_FILE);
    let report_path = args.output.join(REPORT_FILE);

    let (ckpt, log) = run_selfsup(&dataset, &args.train, args.seed, exec)?;
    train::write_log(&log, std::io::BufWriter::new(fs::File::create(&log_path)?))?;
    checkpoint::save(&ckpt, &ckpt_path)?;
    let flags = ClusterFlags { ids: None, restarts: args.restarts, pooling: args.pooling };
    let ids = if args.input.is_some() { None } else { Some(args.sim.ids) };
    let flags = ClusterFlags { ids: ids.or(flags.ids), ..flags };
    let assignments = cluster_and_write(&dataset, &ckpt.head, &flags, args.seed, exec, &csv_path)?;
    let k = resolve_identities(&dataset, flags.ids)?;
    evaluate_and_write(&dataset, &assignments, k, &report_path)?;
    rec.finish(
        &args.output.join(MANIFEST_FILE),
        serde_json::json!({
            "simulate": sim_config,
            "train": train_config(&args.train, args.seed, exec),
            "cluster": { "restarts": args.restarts, "pooling": pooling(args.pooling),
                         "kmeans_seed": stage_seed(args.seed, Stage::KMeans) },
        }),
        args.seed,
        inputs,
        vec![ckpt_path, log_path, csv_path, report_path],
    )
}

/// Rewrite an argument list so `--output`/`-o` points at `dir`, keeping the
/// original file name for single-file outputs.
fn redirect_output(argv: &[String], command: &str, dir: &Path) -> Vec<String> {
    let mut out = argv.to_vec();
    for i in 0..out.len() {
        if (out[i] == "--output" || out[i] == "-o") && i + 1 < out.len() {
            let original = PathBuf::from(&out[i + 1]);
            let target = if command == "simulate" {
                dir.join(original.file_name().unwrap_or_default())
            } else {
                dir.to_path_buf()
            };
            out[i + 1] = target.display().to_string();
        }
    }
    out
}

fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let file: ManifestFile = serde_json::from_slice(&fs::read(&args.manifest)?)?;
    ensure_dir(&args.output)?;
    let mut mismatches = Vec::new();
    for run in &file.runs {
        let argv = redirect_output(&run.argv, &run.command, &args.output);
        let mut full = vec![OsString::from("herdid")];
        full.extend(argv.iter().map(OsString::from));
        let cli = Cli::try_parse_from(full).map_err(|e| Error::Usage(clap_message(&e)))?;
        dispatch(cli, argv)?;
        for original in &run.outputs {
            let name = original.file_name().unwrap_or_default();
            let replayed = args.output.join(name);
            let expected = run.checksums.get(&original.display().to_string());
            let actual = sha256_file(&replayed)?;
            let ok = expected == Some(&actual);
            eprintln!("{} {}", if ok { "match" } else { "DIFFER" }, replayed.display());
            if !ok && !name.to_string_lossy().ends_with(".json") {
                mismatches.push(replayed.display().to_string());
            }
        }
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!("replayed artifacts differ: {}", mismatches.join(", "))))
    }
}

fn clap_message(e: &clap::Error) -> String {
    let line = first_line(&e.to_string());
    line.strip_prefix("error: ").unwrap_or(&line).to_string()
}

fn first_line(s: &str) -> String {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

fn configure_threads(deterministic: bool) -> Result<()> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Usage(format!("{THREADS_ENV} must be >= 1")));
        }
        parallel::configure_threads(n);
    }
    Ok(())
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    let det = cli.deterministic;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, Recorder::new("simulate", argv, det)),
        Command::Train(a) => cmd_train(a, Recorder::new("train", argv, det)),
        Command::Cluster(a) => cmd_cluster(a, Recorder::new("cluster", argv, det)),
        Command::Evaluate(a) => cmd_evaluate(a, Recorder::new("evaluate", argv, det)),
        Command::Pipeline(a) => cmd_pipeline(a, Recorder::new("pipeline", argv, det)),
        Command::Replay(a) => cmd_replay(a),
    }
}

/// Parse and run `args` (including the program name).
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::Usage(clap_message(&e)))?;
    configure_threads(cli.deterministic)?;
    let argv = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    dispatch(cli, argv)
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    let args: Vec<OsString> = std::env::args_os().collect();
    match Cli::try_parse_from(&args) {
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return 0;
        }
        _ => {}
    }
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), first_line(&e.to_string()));
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}
