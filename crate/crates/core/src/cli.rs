//! `qflow` subcommands. Exit codes: 0 success, 1 invalid input, 2 numerical
//! abort during training, 3 undefined correlation during evaluation.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::captions::{Vocabulary, DEFAULT_MAX_CAPTION_LEN};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::Error;
use crate::evaluation::{
    parse_modes, predict, report_from_predictions, AttentionHistogram, EvalMode, EvalReport,
};
use crate::paradigms::{train, CaptionPrompt, ParadigmKind, TrainFailure};
use crate::policy::{ModelDims, PolicyParams};
use crate::synthdata::{generate_dataset, load_dataset, save_dataset, Dataset};

pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_UNDEFINED_CORRELATION: i32 = 3;

pub const TRAIN_LOG: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "checkpoint.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const ABLATION_TABLE: &str = "ablation.txt";

#[derive(Debug, Parser)]
#[command(name = "qflow", version, about = "Image-to-text-to-score quality assessment toy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `data.path` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one paradigm; writes the log and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `run.out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under the requested conditions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "image,text,text_stripped")]
        modes: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run config; restricts evaluation to its test split and supplies the vocabulary.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate one model per (alpha, beta) cell.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `alpha,beta` pairs separated by `;`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn invalid(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UndefinedCorrelation(_) => EXIT_UNDEFINED_CORRELATION,
            Error::NonFinite(_) => EXIT_NUMERICAL,
            _ => EXIT_INVALID,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    init_threads();
    let outcome = match cli.command {
        Command::GenData { config, out } => cmd_gen_data(&config, out.as_deref()),
        Command::Train { config, out_dir } => cmd_train(&config, out_dir.as_deref()),
        Command::Eval {
            ckpt,
            data,
            modes,
            out_dir,
            config,
        } => cmd_eval(&ckpt, &data, &modes, &out_dir, config.as_deref()),
        Command::Ablate {
            config,
            grid,
            out_dir,
        } => cmd_ablate(&config, &grid, &out_dir),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn init_threads() {
    let Ok(v) = std::env::var("QFLOW_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::debug!("thread pool already initialised");
            }
        }
        _ => log::warn!("ignoring QFLOW_THREADS={v:?}"),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn load_vocab(cfg: &RunConfig) -> crate::error::Result<Vocabulary> {
    match &cfg.vocab_path {
        Some(p) => Vocabulary::load(p, DEFAULT_MAX_CAPTION_LEN),
        None => Ok(Vocabulary::default()),
    }
}

/// `records=<n> mos_mean=<m> mos_std=<s> mos_min=<a> mos_max=<b>` and a
/// per-unit histogram line.
pub fn mos_summary(d: &Dataset) -> String {
    let mos: Vec<f64> = d.records.iter().map(|r| r.mos).collect();
    let n = mos.len().max(1) as f64;
    let mean = mos.iter().sum::<f64>() / n;
    let std = (mos.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = mos.iter().copied().fold(f64::INFINITY, f64::min);
    let max = mos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut buckets = [0usize; 4];
    for m in &mos {
        buckets[((m - 1.0).floor().max(0.0) as usize).min(3)] += 1;
    }
    format!(
        "records={} mos_mean={mean:.4} mos_std={std:.4} mos_min={min:.4} mos_max={max:.4}\n\
         mos_hist [1,2)={} [2,3)={} [3,4)={} [4,5]={}",
        mos.len(),
        buckets[0],
        buckets[1],
        buckets[2],
        buckets[3]
    )
}

pub fn cmd_gen_data(config: &Path, out: Option<&Path>) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| CliError::invalid("data.path: no output path (pass --out or set data.path)"))?;
    let data = generate_dataset(cfg.data.seed, cfg.data.n, &cfg.data.generator)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dataset(&data, &out)?;
    println!("{}", mos_summary(&data));
    Ok(())
}

/// Seed for parameter initialisation; training draws from `run.seed` itself.
pub fn init_seed(run_seed: u64) -> u64 {
    run_seed ^ 0x1A17_5EED_0000_0001
}

pub fn initial_params(cfg: &RunConfig, vocab: &Vocabulary, feature_dim: usize, seed: u64) -> CliResult<PolicyParams> {
    let dims = ModelDims::new(vocab.len(), feature_dim);
    match &cfg.init_checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let got = ckpt.params.dims();
            if got.vocab != dims.vocab || got.feature_dim != dims.feature_dim {
                return Err(CliError::invalid(format!(
                    "train.init_checkpoint: dimensions {}x{} do not match vocabulary {} and features {}",
                    got.vocab, got.feature_dim, dims.vocab, dims.feature_dim
                )));
            }
            Ok(ckpt.params)
        }
        None => Ok(PolicyParams::init(dims, init_seed(seed))),
    }
}

pub fn checkpoint_for(params: &PolicyParams, kind: ParadigmKind) -> Checkpoint {
    Checkpoint::new(params.clone()).with_meta("paradigm", kind.name())
}

pub struct RunSummary {
    pub params: PolicyParams,
    pub mean_reward: f64,
    pub iterations: usize,
}

/// Trains according to `cfg` with `seed`, streaming the log and checkpoints
/// into `out_dir`. On a numerical abort the last finite parameters are saved
/// as the final checkpoint before the error is returned.
pub fn train_into_dir(cfg: &RunConfig, dataset: &Dataset, vocab: &Vocabulary, out_dir: &Path, seed: u64) -> CliResult<RunSummary> {
    create_dir(out_dir)?;
    let (train_set, _) = dataset.split(cfg.seed, cfg.data.train_fraction);
    let init = initial_params(cfg, vocab, dataset.feature_dim(), seed)?;
    let kind = cfg.paradigm.kind;
    let log_path = out_dir.join(TRAIN_LOG);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let every = cfg.checkpoint_every;
    let result = train(&cfg.paradigm, &cfg.train, vocab, &train_set, init, seed, |stats, params| {
        writeln!(log, "{}", stats.log_line()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && stats.iteration % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let path = out_dir.join(format!("ckpt_{:06}.txt", stats.iteration));
            save_checkpoint(&checkpoint_for(params, kind), path)?;
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    match result {
        Ok(outcome) => {
            save_checkpoint(&checkpoint_for(&outcome.params, kind), &final_path)?;
            let mean_reward = outcome.log.last().map_or(0.0, |s| s.mean_reward);
            Ok(RunSummary {
                params: outcome.params,
                mean_reward,
                iterations: outcome.log.len(),
            })
        }
        Err(TrainFailure {
            error, last_good, log, ..
        }) => {
            save_checkpoint(&checkpoint_for(&last_good, kind), &final_path)?;
            let mut e = CliError::from(error);
            e.message = format!(
                "{} (stopped after {} iterations; last finite checkpoint kept at {})",
                e.message,
                log.len(),
                final_path.display()
            );
            Err(e)
        }
    }
}

fn load_run_inputs(cfg: &RunConfig) -> CliResult<(Dataset, Vocabulary)> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::invalid("data.path: no dataset configured"))?;
    if !path.exists() {
        return Err(CliError::invalid(format!("data.path: {} does not exist", path.display())));
    }
    let dataset = load_dataset(path)?;
    if dataset.records.len() < 2 {
        return Err(CliError::invalid("data.path: dataset needs at least 2 records to split"));
    }
    let vocab = load_vocab(cfg)?;
    Ok((dataset, vocab))
}

pub fn cmd_train(config: &Path, out_dir: Option<&Path>) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::invalid("run.out_dir: no output directory (pass --out-dir or set run.out_dir)"))?;
    let (dataset, vocab) = load_run_inputs(&cfg)?;
    let summary = train_into_dir(&cfg, &dataset, &vocab, &out_dir, cfg.seed)?;
    println!(
        "mean_reward={:.8} iterations={}",
        summary.mean_reward, summary.iterations
    );
    Ok(())
}

fn prompt_for(ckpt: &Checkpoint) -> CliResult<CaptionPrompt> {
    match ckpt.meta("paradigm") {
        Some(name) => {
            let kind: ParadigmKind = name
                .parse()
                .map_err(|_| CliError::invalid(format!("checkpoint: unknown paradigm {name:?}")))?;
            Ok(kind.caption_prompt())
        }
        None => Ok(CaptionPrompt::Image),
    }
}

/// Writes `report.txt` and per-mode `attention_<mode>.csv` /
/// `attention_<mode>_logits.csv` into `out_dir`.
pub fn evaluate_into_dir(
    params: &PolicyParams,
    vocab: &Vocabulary,
    test: &[&crate::synthdata::QualityRecord],
    modes: &[EvalMode],
    prompt: CaptionPrompt,
    out_dir: &Path,
) -> CliResult<EvalReport> {
    create_dir(out_dir)?;
    if test.len() < 3 {
        return Err(CliError::invalid(format!("need at least 3 test records, got {}", test.len())));
    }
    let preds = predict(params, vocab, test, modes, prompt)?;
    let report = report_from_predictions(&preds, modes)?;
    write_file(&out_dir.join(REPORT_FILE), &report.to_file_string())?;
    for &mode in modes {
        let hist = AttentionHistogram::from_traces(
            preds.iter().filter(|p| p.mode == mode).map(|p| &p.trace),
            vocab,
        );
        write_file(&out_dir.join(format!("attention_{mode}.csv")), &hist.to_csv())?;
        write_file(
            &out_dir.join(format!("attention_{mode}_logits.csv")),
            &hist.logits_csv(),
        )?;
    }
    Ok(report)
}

pub fn cmd_eval(ckpt: &Path, data: &Path, modes: &str, out_dir: &Path, config: Option<&Path>) -> CliResult<()> {
    let modes = parse_modes(modes).map_err(|e| CliError::invalid(format!("--modes: {e}")))?;
    let checkpoint = load_checkpoint(ckpt).map_err(|e| CliError::invalid(format!("{}: {e}", ckpt.display())))?;
    let dataset = load_dataset(data).map_err(|e| CliError::invalid(format!("{}: {e}", data.display())))?;
    let cfg = config.map(RunConfig::load).transpose()?;
    let vocab = match &cfg {
        Some(c) => load_vocab(c)?,
        None => Vocabulary::default(),
    };
    let dims = checkpoint.params.dims();
    if dims.vocab != vocab.len() || dims.feature_dim != dataset.feature_dim() {
        return Err(CliError::invalid(format!(
            "checkpoint expects vocabulary {} and {} features; got {} and {}",
            dims.vocab,
            dims.feature_dim,
            vocab.len(),
            dataset.feature_dim()
        )));
    }
    let test: Vec<_> = match &cfg {
        Some(c) => dataset.split(c.seed, c.data.train_fraction).1,
        None => dataset.records.iter().collect(),
    };
    let prompt = prompt_for(&checkpoint)?;
    let report = evaluate_into_dir(&checkpoint.params, &vocab, &test, &modes, prompt, out_dir)?;
    for row in &report.rows {
        println!("condition={} plcc={:.6} srcc={:.6} n={}", row.mode, row.plcc, row.srcc, row.n);
    }
    if let Some(line) = report.gap_line() {
        println!("{line}");
    }
    Ok(())
}

pub fn parse_grid(s: &str) -> crate::error::Result<Vec<(f64, f64)>> {
    let mut grid = Vec::new();
    for cell in s.split(';').map(str::trim).filter(|c| !c.is_empty()) {
        let (a, b) = cell
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("--grid: expected `alpha,beta`, got {cell:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| Error::invalid(format!("--grid: bad weight {v:?}")))
        };
        grid.push((parse(a)?, parse(b)?));
    }
    if grid.is_empty() {
        return Err(Error::invalid("--grid: no (alpha, beta) cells given"));
    }
    Ok(grid)
}

/// Run seed XOR the first eight bytes of SHA-256 over the weights' bit patterns.
pub fn cell_seed(run_seed: u64, alpha: f64, beta: f64) -> u64 {
    let mut h = Sha256::new();
    h.update(alpha.to_bits().to_le_bytes());
    h.update(beta.to_bits().to_le_bytes());
    let d = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&d[..8]);
    run_seed ^ u64::from_le_bytes(head)
}

pub fn cell_dir_name(alpha: f64, beta: f64) -> String {
    format!("alpha{alpha}_beta{beta}")
}

pub fn cmd_ablate(config: &Path, grid: &str, out_dir: &Path) -> CliResult<()> {
    let grid = parse_grid(grid)?;
    let base = RunConfig::load(config)?;
    let (dataset, vocab) = load_run_inputs(&base)?;
    create_dir(out_dir)?;
    let (_, test) = dataset.split(base.seed, base.data.train_fraction);
    let prompt = base.paradigm.kind.caption_prompt();

    let mut table = format!("# paradigm={}\n", base.paradigm.kind);
    let mut failures = 0;
    for &(alpha, beta) in &grid {
        let mut cfg = base.clone();
        cfg.paradigm.alpha = alpha;
        cfg.paradigm.beta = beta;
        let dir = out_dir.join(cell_dir_name(alpha, beta));
        let seed = cell_seed(base.seed, alpha, beta);
        let outcome = cfg
            .validate()
            .map_err(CliError::from)
            .and_then(|_| train_into_dir(&cfg, &dataset, &vocab, &dir, seed))
            .and_then(|s| evaluate_into_dir(&s.params, &vocab, &test, &[EvalMode::Image, EvalMode::Text], prompt, &dir));
        match outcome {
            Ok(report) => {
                for row in &report.rows {
                    let _ = writeln!(
                        table,
                        "alpha={alpha} beta={beta} condition={} plcc={:.6} srcc={:.6}",
                        row.mode, row.plcc, row.srcc
                    );
                }
            }
            Err(e) => {
                failures += 1;
                log::error!("cell alpha={alpha} beta={beta} failed: {}", e.message);
                let msg = e.message.replace('\n', " ");
                let _ = writeln!(table, "alpha={alpha} beta={beta} status=failed error={msg}");
            }
        }
    }
    write_file(&out_dir.join(ABLATION_TABLE), &table)?;
    print!("{table}");
    if failures > 0 {
        return Err(CliError::invalid(format!("{failures} of {} ablation cells failed", grid.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1,0;0,1;1,1").unwrap(), vec![(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("1;0").is_err());
        assert!(parse_grid("-1,0").is_err());
    }

    #[test]
    fn cell_seeds_depend_only_on_the_cell() {
        assert_eq!(cell_seed(5, 1.0, 0.0), cell_seed(5, 1.0, 0.0));
        assert_ne!(cell_seed(5, 1.0, 0.0), cell_seed(5, 0.0, 1.0));
        assert_ne!(cell_seed(5, 1.0, 0.0), cell_seed(6, 1.0, 0.0));
    }
}
