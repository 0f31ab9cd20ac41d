//! `sed`: prepare spaces, train, sample, evaluate and visualise
//! self-conditioned embedding diffusion models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sed_core::checkpoint::Checkpoint;
use sed_core::config::{EvalTask, RunConfig, DETERMINISM_ENV};
use sed_core::corpus::{TokenizerMode, Vocab};
use sed_core::embedding::{EmbeddingMatrix, SpaceKind};
use sed_core::error::SedError;
use sed_core::masking::ConditioningMask;
use sed_core::pipeline::{self, EvalSetup, RunOptions};
use sed_core::sampler::{trace_csv, SampleRequest, TraceOptions};
use sed_core::schedule::NoiseSchedule;
use sed_core::viz::{forward_trace, DEFAULT_K};

const AFTER_HELP: &str = "\
Environment:
  SED_DETERMINISTIC  1/true/on/yes enables determinism mode, 0/false/off/no
                     disables it, overriding the config file. In determinism
                     mode logs and manifests omit wall-clock quantities, so
                     reruns with the same seeds produce identical files.

Exit status: 0 on success, 1 on a usage error, 2 on a runtime failure.";

#[derive(Parser, Debug)]
#[command(name = "sed", version, about = "Self-conditioned embedding diffusion for text", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the vocabulary and diffusion space and write them with a config.
    Prepare(PrepareArgs),
    /// Train a model; the checkpoint goes to OUT/checkpoint.
    Train(TrainArgs),
    /// Generate or infill text from a checkpoint.
    Sample(SampleArgs),
    /// Score samples against the validation data.
    Eval(EvalArgs),
    /// Trace nearest-neighbor ranks along the forward process.
    VizForward(VizArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Base config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file, one document per line. The built-in corpus when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Maximum vocabulary size including PAD and UNK.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TokenizerMode>,
    #[arg(long, value_parser = parse_space)]
    space: Option<SpaceKind>,
    /// Embedding dimension; ignored by the bits space.
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from OUT/checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long, value_parser = parse_space)]
    space: Option<SpaceKind>,
    #[arg(long, value_enum)]
    self_cond: Option<OnOff>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    max_spans: Option<usize>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Checkpoint directory (or a run directory containing `checkpoint`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text the samples must start with.
    #[arg(long, conflicts_with = "infill_spec")]
    prompt: Option<String>,
    /// Text with `___N` gaps of N tokens to fill.
    #[arg(long)]
    infill_spec: Option<String>,
    /// Output length in tokens for unconditional and prompted sampling.
    #[arg(long)]
    length: Option<usize>,
    /// Guidance scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    scale: Option<Vec<f64>>,
    /// Reverse steps (respaced when below the training schedule length).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples per scale.
    #[arg(short = 'n', long = "count")]
    count: Option<usize>,
    /// Output file; a `.manifest.json` sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the reverse-process CSV of the first sample here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Record every N-th reverse step in the trace.
    #[arg(long, default_value_t = 50)]
    trace_every: usize,
    #[arg(long = "K", default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_task)]
    task: Option<EvalTask>,
    #[arg(short = 'n', long = "samples")]
    samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VizArgs {
    /// Take the space, vocabulary and schedule from a checkpoint.
    #[arg(long, conflicts_with_all = ["embeddings", "vocab"])]
    checkpoint: Option<PathBuf>,
    /// An embedding file, used with --vocab.
    #[arg(long, requires = "vocab")]
    embeddings: Option<PathBuf>,
    #[arg(long, requires = "embeddings")]
    vocab: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode, default_value = "char")]
    mode: TokenizerMode,
    #[arg(long)]
    text: String,
    /// Forward schedule length (the checkpoint's by default, else 1000).
    #[arg(long)]
    steps: Option<usize>,
    /// Record every N-th step.
    #[arg(long, default_value_t = 50)]
    every: usize,
    #[arg(long = "K", default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes PREFIX.csv and PREFIX.html.
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<TokenizerMode, String> {
    s.parse().map_err(|e: SedError| e.to_string())
}

fn parse_space(s: &str) -> Result<SpaceKind, String> {
    s.parse().map_err(|e: SedError| e.to_string())
}

fn parse_task(s: &str) -> Result<EvalTask, String> {
    s.parse().map_err(|e: SedError| e.to_string())
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(SedError),
}

impl From<SedError> for Failure {
    fn from(e: SedError) -> Self {
        Self::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Config problems are the caller's to fix.
fn checked(cfg: RunConfig) -> CliResult<RunConfig> {
    match cfg.validate() {
        Ok(()) => Ok(cfg),
        Err(e @ (SedError::Config(_) | SedError::InvalidArgument(_))) => Err(usage(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => match RunConfig::load(p) {
            Ok(c) => Ok(c),
            Err(e @ SedError::Config(_)) => Err(usage(e.to_string())),
            Err(e) => Err(e.into()),
        },
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let nested = path.join(pipeline::CHECKPOINT_DIR);
    let dir = if nested.join(sed_core::checkpoint::MANIFEST_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    };
    Ok(Checkpoint::load(&dir)?)
}

fn write(path: &Path, contents: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| SedError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| SedError::io(path, e).into())
}

fn run_prepare(a: PrepareArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = a.corpus {
        if !p.exists() {
            return Err(SedError::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)).into());
        }
        cfg.corpus.path = Some(p);
    }
    if let Some(v) = a.vocab_size {
        cfg.corpus.vocab_size = v;
    }
    if let Some(m) = a.mode {
        cfg.corpus.mode = m;
    }
    if let Some(s) = a.space {
        cfg.space.kind = s;
        cfg.space.embedding_path = None;
    }
    if let Some(d) = a.d_embed {
        cfg.space.d_embed = d;
    }
    if let Some(s) = a.seed {
        cfg.space.seed = s;
    }
    let cfg = checked(cfg)?;
    let summary = pipeline::prepare(&cfg, &a.out)?;
    if cfg.space.kind == SpaceKind::Bits && a.d_embed.is_some_and(|d| d != summary.d_embed) {
        eprintln!("note: the bits space ignores --d-embed");
    }
    println!(
        "vocab {} space {} D = {} (train {} tokens, validation {} tokens) -> {}",
        summary.vocab_size,
        summary.space.as_str(),
        summary.d_embed,
        summary.train_tokens,
        summary.validation_tokens,
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.resume
        && (a.space.is_some() || a.self_cond.is_some() || a.d_embed.is_some() || a.max_spans.is_some())
    {
        return Err(usage("--resume continues the stored run; only --steps may change"));
    }
    if let Some(s) = a.space {
        cfg.space.kind = s;
        cfg.space.embedding_path = None;
    }
    if let Some(s) = a.self_cond {
        cfg.denoiser.self_condition = matches!(s, OnOff::On);
    }
    if let Some(d) = a.d_embed {
        cfg.space.d_embed = d;
        cfg.space.embedding_path = None;
    }
    if let Some(m) = a.max_spans {
        cfg.train.max_spans = m;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let cfg = checked(cfg)?;
    let options = RunOptions {
        resume: a.resume,
        stop_after: None,
    };
    let cfg = if a.resume {
        let mut stored = load_checkpoint(&a.out)?.config;
        if let Some(s) = a.steps {
            stored.train.steps = s;
        }
        stored.deterministic = cfg.deterministic;
        stored
    } else {
        cfg
    };
    let summary = pipeline::train_run(&cfg, &a.out, options, &mut |m| {
        eprintln!(
            "step {:>6}  loss {:.4}  diffusion {:.4}  recon {:.4}  lr {:.2e}{}",
            m.step,
            m.loss,
            m.diffusion,
            m.recon,
            m.learning_rate,
            m.tokens_per_sec.map(|r| format!("  {r:.0} tok/s")).unwrap_or_default()
        )
    })?;
    println!("trained {} steps -> {}", summary.steps_done, summary.checkpoint.display());
    Ok(())
}

/// One sample per line with backslash, newline and carriage return escaped.
fn escape_line(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

#[derive(Serialize)]
struct SampleManifest<'a> {
    checkpoint: String,
    seed: u64,
    steps: usize,
    scales: &'a [f64],
    count: usize,
    mask: String,
    /// Lines are grouped by scale in the order listed.
    lines: usize,
}

fn run_sample(a: SampleArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = &ck.config;
    let scales = a.scale.clone().unwrap_or_else(|| cfg.sample.scales.clone());
    if scales.is_empty() || scales.iter().any(|s| !(0.0..=sed_core::sampler::MAX_GUIDANCE_SCALE).contains(s)) {
        return Err(usage("guidance scales must lie in [0, 8]"));
    }
    let count = a.count.unwrap_or(cfg.sample.count);
    if count == 0 {
        return Err(usage("-n must be positive"));
    }
    let seed = a.seed.unwrap_or(cfg.sample.seed);
    let steps = a.steps.or(cfg.sample.steps);
    let schedule_len = cfg.schedule.steps;
    if steps.is_some_and(|s| s == 0 || s > schedule_len) {
        return Err(usage(format!("--steps must lie in [1, {schedule_len}]")));
    }
    let length = a.length.unwrap_or_else(|| pipeline::sample_length(cfg));
    let (mask, tokens) = if let Some(spec) = &a.infill_spec {
        pipeline::compile_infill_spec(spec, &ck.vocab).map_err(|e| usage(e.to_string()))?
    } else if let Some(prompt) = &a.prompt {
        let ids = ck.vocab.encode(prompt).0;
        if ids.len() > length {
            return Err(usage(format!("prompt has {} tokens, more than --length {length}", ids.len())));
        }
        let mask = ConditioningMask((0..length).map(|i| i < ids.len()).collect());
        let mut tokens = ids;
        tokens.resize(length, sed_core::corpus::PAD_ID);
        (mask, tokens)
    } else {
        (ConditioningMask::unconditional(length), vec![sed_core::corpus::PAD_ID; length])
    };
    if mask.len() > cfg.denoiser.max_len {
        return Err(usage(format!(
            "{} tokens exceed the model maximum {}",
            mask.len(),
            cfg.denoiser.max_len
        )));
    }

    let mut lines = Vec::new();
    for (i, &s) in scales.iter().enumerate() {
        let request = SampleRequest {
            mask: mask.clone(),
            tokens: tokens.clone(),
            scale: s,
            count,
            seed,
        };
        let trace = (i == 0 && a.trace.is_some()).then_some(TraceOptions {
            every: a.trace_every,
            k: a.k,
        });
        if trace.is_some() && a.k > ck.vocab.size() {
            eprintln!("warning: K = {} clamped to the vocabulary size {}", a.k, ck.vocab.size());
        }
        let out = pipeline::sample_checkpoint(&ck, &request, steps, trace)?;
        if let (Some(path), true) = (&a.trace, i == 0) {
            write(path, &trace_csv(&out.trace, Some(&ck.vocab)))?;
        }
        for sample in &out.samples {
            lines.push(escape_line(&ck.vocab.decode(&sample.0, true)));
        }
    }
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match &a.out {
        Some(path) => {
            write(path, &body)?;
            let manifest = SampleManifest {
                checkpoint: ck.id(),
                seed,
                steps: steps.unwrap_or(schedule_len),
                scales: &scales,
                count,
                mask: mask.to_bit_string(),
                lines: lines.len(),
            };
            let mut sidecar = path.as_os_str().to_owned();
            sidecar.push(".manifest.json");
            write(Path::new(&sidecar), &serde_json::to_string_pretty(&manifest).map_err(SedError::from)?)?;
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = &ck.config.eval;
    let scales = a.scales.clone().unwrap_or_else(|| cfg.scales.clone());
    if scales.is_empty() || scales.iter().any(|s| !(0.0..=sed_core::sampler::MAX_GUIDANCE_SCALE).contains(s)) {
        return Err(usage("guidance scales must lie in [0, 8]"));
    }
    let samples = a.samples.unwrap_or(cfg.samples);
    if samples == 0 {
        return Err(usage("-n must be positive"));
    }
    let steps = a.steps.or(ck.config.sample.steps);
    if steps.is_some_and(|s| s == 0 || s > ck.config.schedule.steps) {
        return Err(usage(format!("--steps must lie in [1, {}]", ck.config.schedule.steps)));
    }
    let setup = EvalSetup::for_checkpoint(&ck)?;
    let report = pipeline::eval_report(
        &ck,
        &setup,
        a.task.unwrap_or(cfg.task),
        samples,
        &scales,
        steps,
        a.seed.unwrap_or(cfg.seed),
    )?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = &a.out {
        write(&dir.join("report.json"), &report.to_json())?;
        write(&dir.join("report.txt"), &table)?;
    }
    Ok(())
}

fn run_viz(a: VizArgs) -> CliResult {
    let (embedding, vocab, schedule) = match (&a.checkpoint, &a.embeddings, &a.vocab) {
        (Some(c), _, _) => {
            let ck = load_checkpoint(c)?;
            let mut sched_cfg = ck.config.schedule.clone();
            if let Some(t) = a.steps {
                sched_cfg.steps = t;
            }
            let sched = sched_cfg.build().map_err(|e| usage(e.to_string()))?;
            (ck.embedding, ck.vocab, sched)
        }
        (None, Some(e), Some(v)) => {
            let vocab = Vocab::load(v, a.mode)?;
            let e = EmbeddingMatrix::load(e, Some(vocab.size()))?;
            let sched = NoiseSchedule::cosine(a.steps.unwrap_or(1000), 0.008, 0.0)
                .map_err(|e| usage(e.to_string()))?;
            (e, vocab, sched)
        }
        _ => return Err(usage("give --checkpoint, or --embeddings with --vocab")),
    };
    let tokens = vocab.encode(&a.text).0;
    if tokens.is_empty() {
        return Err(usage("--text encodes to no tokens"));
    }
    let mut k = a.k;
    if k > vocab.size() {
        eprintln!("warning: K = {k} clamped to the vocabulary size {}", vocab.size());
        k = vocab.size();
    }
    if k == 0 {
        return Err(usage("--K must be positive"));
    }
    let trace = forward_trace(&tokens, &embedding, &schedule, a.every, k, a.seed)?;
    let mut csv = a.out.as_os_str().to_owned();
    csv.push(".csv");
    let mut html = a.out.as_os_str().to_owned();
    html.push(".html");
    write(Path::new(&csv), &trace.to_csv(Some(&vocab)))?;
    write(Path::new(&html), &trace.to_html(Some(&vocab)))?;
    println!(
        "D = {}  K = {k}  mean intermediate-rank steps per position {:.2}",
        embedding.dim(),
        trace.mean_intermediate_steps()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let deterministic = sed_core::config::determinism_from_env();
    if std::env::var_os(DETERMINISM_ENV).is_some() && deterministic.is_none() {
        eprintln!("error: {DETERMINISM_ENV} must be one of 1/true/on/yes or 0/false/off/no");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Prepare(a) => run_prepare(a),
        Command::Train(a) => run_train(a),
        Command::Sample(a) => run_sample(a),
        Command::Eval(a) => run_eval(a),
        Command::VizForward(a) => run_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
