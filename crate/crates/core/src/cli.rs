//! Command-line surface. Every command writes under `--out DIR`, which is
//! held with a lock file for the duration of the run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{generate_corpus, load_all, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::experiment::{evaluate, sweep_latency, EvalConfig, EvalRow, ExperimentConfig, Recipe, SweepRow};
use crate::mcr::mcr_memory_probe;
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::numerics::Real;
use crate::train::{load_optimizer, save_optimizer, Precision, StepReport, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const THREADS_ENV: &str = "UNIFY_RNNT_THREADS";

const EVAL_HELP: &str = "\
Output: DIR/eval.csv with header `mode,chunk_s,right_s,latency_s,ter`.
The first row is the offline decode (seconds columns are `inf`); the
remaining rows are streaming decodes ordered by latency_s descending, where
latency_s = (chunk + right) * frame_ms / 1000 and ter is corpus-level token
error rate (total edits / total reference tokens).";

const SWEEP_HELP: &str = "\
Output: DIR/sweep.csv with header `budget_s,chunk_s,right_s,ter`.
For each budget B (encoder frames) there are B rows, one per split
chunk = 1..=B, right = B - chunk; budget_s is constant within a group.";

const BENCH_HELP: &str = "\
Output: DIR/bench_mcr.json (also printed) with keys shape, tile,
aux_bytes_fused, aux_bytes_naive, ratio, wall_ms_fused, wall_ms_naive,
loss_fused, loss_naive. Auxiliary bytes are peak heap use beyond inputs and
gradient buffers.";

const TRAIN_HELP: &str = "\
Output: DIR/metrics.jsonl (one JSON object per step with keys step, lr,
mode, spec, loss, loss_off, loss_str, loss_mcr, grad_norm, wall_ms),
DIR/model.ckpt, DIR/model.ckpt.opt (optimizer state) and DIR/config.toml.
With --resume, training continues from DIR/model.ckpt at its saved step.";

const REPORT_HELP: &str = "\
Output: DIR/report.csv with header `run,mode,chunk_s,right_s,latency_s,ter`
collected from every RUNS/<run>/eval.csv, and DIR/report.md with one table
row per run.";

const EXIT_HELP: &str = "\
Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 I/O error.
Environment: UNIFY_RNNT_THREADS caps worker threads.";

#[derive(Debug, Parser)]
#[command(name = "unirnnt", version, about = "Unified offline/streaming transducer toolkit", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and eval corpora.
    #[command(after_help = "Output: DIR/train/manifest.jsonl, DIR/eval/manifest.jsonl with feature files, DIR/config.toml.")]
    GenData(GenDataArgs),
    /// Train a model with the configured recipe.
    #[command(after_help = TRAIN_HELP)]
    Train(TrainArgs),
    /// Decode an eval set offline and at each latency spec.
    #[command(after_help = EVAL_HELP)]
    Eval(EvalArgs),
    /// Evaluate every chunk/right split of fixed latency budgets.
    #[command(after_help = SWEEP_HELP)]
    SweepLatency(SweepArgs),
    /// Compare fused and materialized regularizer memory and time.
    #[command(after_help = BENCH_HELP)]
    BenchMcr(BenchArgs),
    /// Collect eval tables of several runs.
    #[command(after_help = REPORT_HELP)]
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides corpus.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides train.seed and model.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// offline_baseline, streaming_baseline, single_mode, dual_mode or dm_mcr.
    #[arg(long)]
    pub recipe: Option<String>,
    /// Overrides train.steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from DIR/model.ckpt.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Reads the [eval] table; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated `chunk:right` specs in encoder frames.
    #[arg(long)]
    pub specs: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated budgets in encoder frames.
    #[arg(long)]
    pub budgets: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub labels: usize,
    #[arg(long, default_value_t = 1024)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub tile: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory whose subdirectories hold eval.csv files.
    #[arg(long)]
    pub runs: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::MissingFeatureFile(_) => EXIT_IO,
        Error::NonFiniteLoss { .. } | Error::NonFiniteInput(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Exclusive handle on an output directory.
pub struct OutDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub const LOCK_NAME: &'static str = ".lock";

    pub fn acquire(path: &Path) -> Result<Self> {
        let unwritable = |why: String| Error::Config(format!("output directory {} is unwritable: {why}", path.display()));
        fs::create_dir_all(path).map_err(|e| unwritable(e.to_string()))?;
        let lock = path.join(Self::LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Config(format!(
                    "output directory {} is locked by another process (remove {} if stale)",
                    path.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(unwritable(e.to_string())),
        }
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Configures the global worker pool from `UNIFY_RNNT_THREADS`.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    cfg.validate()?;
    let out = OutDir::acquire(&a.common.out)?;
    let train = generate_corpus(&cfg.corpus, cfg.train_utterances, &out.join("train"))?;
    let eval = generate_corpus(&cfg.eval_corpus(), cfg.eval_utterances, &out.join("eval"))?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    println!("wrote {} and {}", train.display(), eval.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad {what} entry {x:?}"))))
        .collect()
}

/// Keeps only metric lines at or before `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["step"].as_u64())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    write_file(path, &kept)
}

fn train_with<T: Real>(cfg: &ExperimentConfig, a: &TrainArgs, out: &OutDir) -> Result<()> {
    let tcfg = cfg.effective_train();
    let manifest = a.data.join("train").join(MANIFEST_NAME);
    let data = load_all(&manifest, cfg.model.feat_dim)?;
    let ckpt = out.join("model.ckpt");
    let opt_path = out.join("model.ckpt.opt");
    let metrics = out.join("metrics.jsonl");
    let mut trainer = if a.resume {
        let (model, step) = load_checkpoint::<T>(&ckpt, Some(&cfg.model))?;
        let mut t = Trainer::new(model, tcfg)?;
        load_optimizer(&mut t.opt, &opt_path)?;
        t.step = step;
        truncate_metrics(&metrics, step)?;
        eprintln!("resuming at step {step}");
        t
    } else {
        Trainer::new(Model::<T>::new(cfg.model.clone())?, tcfg)?
    };
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let mut log = std::io::BufWriter::new(file);
    let every = cfg.checkpoint_every.max(1);
    while trainer.step < trainer.cfg.steps {
        let r: StepReport = trainer.step_once(&data)?;
        let line = serde_json::to_string(&r).expect("reports serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics, e))?;
        if r.step % every == 0 || r.step == trainer.cfg.steps {
            log.flush().map_err(|e| Error::io(&metrics, e))?;
            save_checkpoint(&trainer.model, r.step, &ckpt)?;
            save_optimizer(&trainer.opt, &opt_path)?;
            eprintln!("step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
        }
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    if !ckpt.exists() {
        save_checkpoint(&trainer.model, trainer.step, &ckpt)?;
        save_optimizer(&trainer.opt, &opt_path)?;
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(r) = &a.recipe {
        cfg.recipe = Some(Recipe::parse(r)?);
    }
    if let Some(n) = a.steps {
        cfg.train.steps = n;
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(n);
    }
    cfg.validate()?;
    let out = OutDir::acquire(&a.common.out)?;
    match cfg.train.precision {
        Precision::F32 => train_with::<f32>(&cfg, a, &out),
        Precision::F64 => train_with::<f64>(&cfg, a, &out),
    }
}

fn eval_config(path: Option<&Path>) -> Result<EvalConfig> {
    Ok(load_config(path)?.eval)
}

fn csv<R>(header: &str, rows: &[R], line: impl Fn(&R) -> String) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<EvalRow>> {
    let mut ecfg = eval_config(a.config.as_deref())?;
    if let Some(s) = &a.specs {
        ecfg.specs = s
            .split(',')
            .map(|p| {
                let v: Vec<usize> = parse_list(&p.replace(':', ","), "spec")?;
                match v[..] {
                    [c, r] => Ok([c, r]),
                    _ => Err(Error::Config(format!("spec {p:?} is not chunk:right"))),
                }
            })
            .collect::<Result<_>>()?;
    }
    ecfg.context_specs()?;
    let (model, _) = load_checkpoint::<f32>(&a.checkpoint, None)?;
    let utts = load_all(&a.manifest, model.cfg.feat_dim)?;
    let out = OutDir::acquire(&a.common.out)?;
    let rows = evaluate(&model, &utts, &ecfg)?;
    let text = csv(EvalRow::CSV_HEADER, &rows, EvalRow::csv);
    write_file(&out.join("eval.csv"), &text)?;
    print!("{text}");
    Ok(rows)
}

pub fn cmd_sweep_latency(a: &SweepArgs) -> Result<Vec<SweepRow>> {
    let ecfg = eval_config(a.config.as_deref())?;
    let budgets = match &a.budgets {
        Some(b) => parse_list(b, "budget")?,
        None => ecfg.budgets.clone(),
    };
    let (model, _) = load_checkpoint::<f32>(&a.checkpoint, None)?;
    let utts = load_all(&a.manifest, model.cfg.feat_dim)?;
    let out = OutDir::acquire(&a.common.out)?;
    let rows = sweep_latency(&model, &utts, &budgets, &ecfg)?;
    let text = csv(SweepRow::CSV_HEADER, &rows, SweepRow::csv);
    write_file(&out.join("sweep.csv"), &text)?;
    print!("{text}");
    Ok(rows)
}

pub fn cmd_bench_mcr(a: &BenchArgs) -> Result<()> {
    let out = OutDir::acquire(&a.common.out)?;
    let report = mcr_memory_probe([a.batch, a.frames, a.labels, a.vocab], a.tile, a.seed)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("bench_mcr.json"), &text)?;
    println!("{text}");
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut runs: Vec<PathBuf> = fs::read_dir(&a.runs)
        .map_err(|e| Error::io(&a.runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("eval.csv").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Config(format!("no eval.csv under {}", a.runs.display())));
    }
    let out = OutDir::acquire(&a.common.out)?;
    let mut all = String::from("run,mode,chunk_s,right_s,latency_s,ter\n");
    let mut md = String::new();
    for run in &runs {
        let name = run.file_name().unwrap_or_default().to_string_lossy().to_string();
        let path = run.join("eval.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(EvalRow::CSV_HEADER) {
            return Err(Error::Config(format!("{}: unexpected header", path.display())));
        }
        let rows: Vec<&str> = lines.collect();
        if md.is_empty() {
            let heads: Vec<String> = rows
                .iter()
                .map(|r| {
                    let f: Vec<&str> = r.split(',').collect();
                    if f[0] == "offline" {
                        "offline".to_string()
                    } else {
                        format!("{}s", f[3])
                    }
                })
                .collect();
            md.push_str(&format!("| run | {} |\n|---|{}\n", heads.join(" | "), "---|".repeat(heads.len())));
        }
        let ters: Vec<&str> = rows.iter().map(|r| r.rsplit(',').next().unwrap_or("")).collect();
        md.push_str(&format!("| {name} | {} |\n", ters.join(" | ")));
        for r in rows {
            all.push_str(&format!("{name},{r}\n"));
        }
    }
    write_file(&out.join("report.csv"), &all)?;
    write_file(&out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::SweepLatency(a) => cmd_sweep_latency(a).map(|_| ()),
        Command::BenchMcr(a) => cmd_bench_mcr(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
