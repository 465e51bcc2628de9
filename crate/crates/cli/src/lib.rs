//! Command-line front end: `generate`, `verify`, `bench` and `init-weights`.
//!
//! Exit codes are a stable contract: 0 success, 1 usage, 2 weight file,
//! 3 context truncation, 4 verification failure. `generate` writes only
//! token ids to standard output; everything else goes to standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use swa_core::attention::{full_pair_count, score_pair_count};
use swa_core::model::{generate, Decoder, GenerationOutput};
use swa_core::oracle::{self, OracleMask, OracleSession};
use swa_core::verify::{self, VerifyOptions};
use swa_core::{weights, DecoderWeights, GenerationSession, ModelConfig, SamplerSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_WEIGHTS: i32 = 2;
pub const EXIT_TRUNCATED: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Longest sequence `bench --execute` will run through the oracle.
const EXECUTE_LIMIT: usize = 1024;

#[derive(Debug, Parser)]
#[command(name = "swa", version, about = "Sliding-window attention inference engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate tokens from a prompt of token ids.
    Generate(GenerateArgs),
    /// Check the rolling-cache engine against the full-history oracle.
    Verify(VerifyArgs),
    /// Analytic attention-pair and cache-memory counts for (L, W) scenarios.
    Bench(BenchArgs),
    /// Write seeded random weights to a weight file.
    InitWeights(InitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Swa,
    OracleSwa,
    OracleCausal,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON config; defaults to the built-in toy config with --random-init.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "random_init")]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub random_init: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Space-separated token ids, e.g. "1 2 3".
    #[arg(long)]
    pub prompt_ids: String,
    #[arg(long, default_value_t = 16)]
    pub max_tokens: usize,
    #[arg(long, conflicts_with = "top_k")]
    pub greedy: bool,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 1.0, requires = "top_k")]
    pub temperature: f32,
    #[arg(long, value_enum, default_value_t = Mode::Swa)]
    pub mode: Mode,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Override window_size.
    #[arg(long)]
    pub window: Option<usize>,
    /// Override n_layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Negative control: the engine attends one key fewer than configured.
    #[arg(long, hide = true)]
    pub inject_mask_off_by_one: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated L:W scenarios.
    #[arg(long)]
    pub bench: String,
    /// Config used for cache byte counts (Table-1 scale when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also time toy-model decode through the engine and the oracle.
    #[arg(long)]
    pub execute: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    WeightFile(String),
    #[error("context overflow: {0}")]
    Truncated(String),
    #[error("{0} verification check(s) failed")]
    VerifyFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::WeightFile(_) => EXIT_WEIGHTS,
            CliError::Truncated(_) => EXIT_TRUNCATED,
            CliError::VerifyFailed(_) => EXIT_VERIFY,
        }
    }
}

impl From<swa_core::Error> for CliError {
    fn from(e: swa_core::Error) -> Self {
        match e {
            swa_core::Error::ContextOverflow { .. } => CliError::Truncated(e.to_string()),
            swa_core::Error::WeightFile(_) => CliError::WeightFile(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Machine-readable summary of one `generate` run, printed as JSON on
/// standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tokens_generated: usize,
    pub wall_time: f64,
    pub tokens_per_second: f64,
    pub cache_bytes_per_layer: usize,
    pub total_cache_bytes: usize,
    pub swa_score_pairs: u64,
    pub full_score_pairs: u64,
    pub pair_ratio: f64,
    pub truncated: bool,
}

impl From<&GenerationOutput> for RunReport {
    fn from(out: &GenerationOutput) -> Self {
        Self {
            tokens_generated: out.tokens.len(),
            wall_time: out.wall_seconds,
            tokens_per_second: out.tokens_per_second,
            cache_bytes_per_layer: out.cache_bytes_per_layer,
            total_cache_bytes: out.total_cache_bytes,
            swa_score_pairs: out.swa_score_pairs,
            full_score_pairs: out.full_score_pairs,
            pair_ratio: out.full_score_pairs as f64 / out.swa_score_pairs as f64,
            truncated: out.truncated,
        }
    }
}

/// Parses arguments and runs one command. Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a, stdout, stderr),
        Command::Verify(a) => cmd_verify(&a, stderr),
        Command::Bench(a) => cmd_bench(&a, stdout),
        Command::InitWeights(a) => cmd_init_weights(&a, stderr),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn read_config(path: Option<&PathBuf>, default: ModelConfig) -> Result<ModelConfig, CliError> {
    match path {
        None => Ok(default),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            ModelConfig::parse(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn parse_prompt(text: &str) -> Result<Vec<usize>, CliError> {
    let ids = text
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| CliError::Usage(format!("invalid token id `{t}` in --prompt-ids")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if ids.is_empty() {
        return Err(CliError::Usage("--prompt-ids must hold at least one id".into()));
    }
    Ok(ids)
}

fn load_weights(args: &GenerateArgs) -> Result<DecoderWeights, CliError> {
    match (&args.weights, args.random_init) {
        (Some(path), false) => {
            let w = weights::load(path).map_err(|e| match e {
                swa_core::Error::Io(io) => {
                    CliError::WeightFile(format!("cannot read {}: {io}", path.display()))
                }
                other => CliError::WeightFile(other.to_string()),
            })?;
            if let Some(cfg_path) = &args.config {
                let cfg = read_config(Some(cfg_path), w.config)?;
                if cfg != w.config {
                    return Err(CliError::WeightFile(
                        "weight file config differs from --config".into(),
                    ));
                }
            }
            Ok(w)
        }
        (None, true) => {
            let cfg = read_config(args.config.as_ref(), ModelConfig::toy())?;
            Ok(DecoderWeights::init_random(&cfg, args.seed)?)
        }
        _ => Err(CliError::Usage(
            "pass exactly one of --weights PATH or --random-init".into(),
        )),
    }
}

pub fn cmd_generate(
    args: &GenerateArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let prompt = parse_prompt(&args.prompt_ids)?;
    let sampler = match args.top_k {
        Some(k) => SamplerSpec::TopK {
            k,
            temperature: args.temperature,
            seed: args.seed,
        },
        None => SamplerSpec::Greedy,
    };
    let weights = Arc::new(load_weights(args)?);

    let output = match args.mode {
        Mode::Swa => generate(
            &mut GenerationSession::new(weights),
            &prompt,
            args.max_tokens,
            sampler,
        ),
        Mode::OracleSwa => generate(
            &mut OracleSession::new(weights, OracleMask::SlidingWindow),
            &prompt,
            args.max_tokens,
            sampler,
        ),
        Mode::OracleCausal => generate(
            &mut OracleSession::new(weights, OracleMask::Causal),
            &prompt,
            args.max_tokens,
            sampler,
        ),
    }?;

    let ids: Vec<String> = output.tokens.iter().map(ToString::to_string).collect();
    writeln!(stdout, "{}", ids.join(" ")).map_err(io_usage)?;
    let report = RunReport::from(&output);
    writeln!(
        stderr,
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    )
    .map_err(io_usage)?;

    if report.truncated {
        return Err(CliError::Truncated(format!(
            "stopped after {} tokens at context length",
            report.tokens_generated
        )));
    }
    Ok(())
}

fn io_usage(e: std::io::Error) -> CliError {
    CliError::Usage(format!("write failed: {e}"))
}

pub fn cmd_verify(args: &VerifyArgs, stderr: &mut dyn Write) -> Result<(), CliError> {
    let mut config = read_config(args.config.as_ref(), ModelConfig::toy())?;
    if let Some(w) = args.window {
        config.window_size = w;
    }
    if let Some(l) = args.layers {
        config.n_layers = l;
    }
    let config = config.validated()?;
    let attention_window = if args.inject_mask_off_by_one {
        if config.window_size < 2 {
            return Err(CliError::Usage("off-by-one injection needs window >= 2".into()));
        }
        Some(config.window_size - 1)
    } else {
        None
    };

    let checks = verify::run_checks(&VerifyOptions {
        config,
        seed: args.seed,
        attention_window,
    })?;
    for check in &checks {
        writeln!(stderr, "{check}").map_err(io_usage)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::VerifyFailed(failed));
    }
    Ok(())
}

/// One `L:W` bench row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub seq_len: usize,
    pub window: usize,
    pub full_pairs: u64,
    pub swa_pairs: u64,
    pub pair_ratio: f64,
    pub unbounded_cache_bytes: u64,
    pub rolling_cache_bytes: u64,
    pub cache_ratio: f64,
    pub engine_seconds: Option<f64>,
    pub oracle_seconds: Option<f64>,
}

pub fn parse_scenarios(text: &str) -> Result<Vec<(usize, usize)>, CliError> {
    text.split(',')
        .map(|item| {
            let bad = || CliError::Usage(format!("malformed scenario `{item}`, expected L:W"));
            let (l, w) = item.trim().split_once(':').ok_or_else(bad)?;
            let l: usize = l.trim().parse().map_err(|_| bad())?;
            let w: usize = w.trim().parse().map_err(|_| bad())?;
            if l == 0 || w == 0 {
                return Err(bad());
            }
            Ok((l, w))
        })
        .collect()
}

pub fn bench_row(config: &ModelConfig, seq_len: usize, window: usize) -> BenchRow {
    let full = full_pair_count(seq_len as u64);
    let swa = score_pair_count(seq_len as u64, window as u64);
    let per_entry = (config.n_layers * 2 * config.n_kv_heads * config.head_dim * 4) as u64;
    let unbounded = per_entry * seq_len as u64;
    let rolling = per_entry * seq_len.min(window) as u64;
    BenchRow {
        seq_len,
        window,
        full_pairs: full,
        swa_pairs: swa,
        pair_ratio: full as f64 / swa as f64,
        unbounded_cache_bytes: unbounded,
        rolling_cache_bytes: rolling,
        cache_ratio: unbounded as f64 / rolling as f64,
        engine_seconds: None,
        oracle_seconds: None,
    }
}

fn execute_row(row: &mut BenchRow, config: &ModelConfig, seed: u64) -> Result<(), CliError> {
    let config = ModelConfig {
        window_size: row.window,
        context_len: config.context_len.max(row.seq_len).max(row.window),
        ..*config
    }
    .validated()?;
    let weights = Arc::new(DecoderWeights::init_random(&config, seed)?);
    let tokens = verify::random_tokens(config.vocab_size, row.seq_len, seed);

    let started = Instant::now();
    let mut session = GenerationSession::new(Arc::clone(&weights));
    for &t in &tokens {
        session.forward_decode(t)?;
    }
    row.engine_seconds = Some(started.elapsed().as_secs_f64());

    let started = Instant::now();
    oracle::oracle_forward_swa(&weights, &tokens)?;
    row.oracle_seconds = Some(started.elapsed().as_secs_f64());
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let scenarios = parse_scenarios(&args.bench)?;
    let config = read_config(args.config.as_ref(), ModelConfig::seven_b())?;
    let exec_config = read_config(args.config.as_ref(), ModelConfig::toy())?;

    writeln!(
        stdout,
        "{:>8} {:>6} {:>14} {:>14} {:>8} {:>16} {:>16} {:>8} {:>10} {:>10}",
        "L", "W", "full_pairs", "swa_pairs", "ratio", "unbounded_bytes", "rolling_bytes", "ratio", "engine_s", "oracle_s"
    )
    .map_err(io_usage)?;
    for (l, w) in scenarios {
        let mut row = bench_row(&config, l, w);
        if args.execute && l <= EXECUTE_LIMIT {
            execute_row(&mut row, &exec_config, args.seed)?;
        }
        let secs = |s: Option<f64>| s.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            stdout,
            "{:>8} {:>6} {:>14} {:>14} {:>8.3} {:>16} {:>16} {:>8.3} {:>10} {:>10}",
            row.seq_len,
            row.window,
            row.full_pairs,
            row.swa_pairs,
            row.pair_ratio,
            row.unbounded_cache_bytes,
            row.rolling_cache_bytes,
            row.cache_ratio,
            secs(row.engine_seconds),
            secs(row.oracle_seconds),
        )
        .map_err(io_usage)?;
    }
    Ok(())
}

pub fn cmd_init_weights(args: &InitArgs, stderr: &mut dyn Write) -> Result<(), CliError> {
    let config = read_config(args.config.as_ref(), ModelConfig::toy())?;
    let w = DecoderWeights::init_random(&config, args.seed)?;
    weights::save(&w, &args.out)
        .map_err(|e| CliError::WeightFile(format!("cannot write {}: {e}", args.out.display())))?;
    writeln!(
        stderr,
        "wrote {} parameters to {}",
        config.parameter_count(),
        args.out.display()
    )
    .map_err(io_usage)?;
    Ok(())
}
