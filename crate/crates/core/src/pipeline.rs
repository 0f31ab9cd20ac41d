//! End-to-end stages shared by the command line and the tests: corpus and
//! space preparation, training runs with logs and checkpoints, sampling and
//! evaluation.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{CorpusConfig, EvalTask, RunConfig};
use crate::corpus::{read_corpus, TokenSeq, TokenStream, Vocab};
use crate::embedding::{EmbeddingMatrix, SpaceKind};
use crate::error::{Result, SedError};
use crate::eval::{MetricReport, MetricRow, NGramScorer};
use crate::masking::ConditioningMask;
use crate::optim::AdamW;
use crate::sampler::{ChainSpec, SampleOutput, SampleRequest, Sampler, TraceOptions};
use crate::skipgram::train_skipgram;
use crate::synthetic::desk_corpus;
use crate::training::{SedModel, StepMetrics, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const SCHEDULE_FILE: &str = "schedule.tsv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const FAILURE_FILE: &str = "failure.json";
pub const EMBEDDING_FILE: &str = "embedding.bin";

/// Grammar documents in the built-in corpus.
pub const BUILTIN_GRAMMAR_LINES: usize = 3000;

/// The corpus text: the configured file, or the built-in desk corpus.
pub fn corpus_text(cfg: &CorpusConfig) -> Result<String> {
    match &cfg.path {
        Some(p) => read_corpus(p),
        None => Ok(desk_corpus(BUILTIN_GRAMMAR_LINES, 0)),
    }
}

/// Lines of `text` split into training and validation text. Every
/// `round(1/fraction)`-th line is held out.
pub fn split_lines(text: &str, fraction: f64) -> (String, String) {
    let mut train = String::new();
    let mut validation = String::new();
    let every = if fraction > 0.0 {
        (1.0 / fraction).round().max(1.0) as usize
    } else {
        usize::MAX
    };
    for (i, line) in text.lines().enumerate() {
        let dest = if every != usize::MAX && i % every == every - 1 {
            &mut validation
        } else {
            &mut train
        };
        dest.push_str(line);
        dest.push('\n');
    }
    (train, validation)
}

/// A vocabulary with the encoded training and validation splits.
#[derive(Clone, Debug)]
pub struct CorpusData {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Reads and splits the corpus. The vocabulary comes from `vocab` when
/// given, else from `corpus.vocab_path`, else from the training split.
pub fn load_corpus(corpus: &CorpusConfig, vocab: Option<Vocab>) -> Result<CorpusData> {
    let text = corpus_text(corpus)?;
    let (train_text, val_text) = split_lines(&text, corpus.validation_fraction);
    let vocab = match (vocab, &corpus.vocab_path) {
        (Some(v), _) => v,
        (None, Some(p)) => Vocab::load(p, corpus.mode)?,
        (None, None) => Vocab::build(&train_text, corpus.vocab_size, corpus.mode)?,
    };
    let train = vocab.encode(&train_text).0;
    if train.is_empty() {
        return Err(SedError::EmptyCorpus);
    }
    let validation = vocab.encode(&val_text).0;
    Ok(CorpusData {
        vocab,
        train,
        validation,
    })
}

/// Builds (or loads) the diffusion space, rounded to 32-bit values.
pub fn build_space(cfg: &RunConfig, data: &CorpusData) -> Result<EmbeddingMatrix> {
    let v = data.vocab.size();
    let space = &cfg.space;
    let e = match (&space.embedding_path, space.kind) {
        (Some(p), _) => EmbeddingMatrix::load(p, Some(v))?,
        (None, SpaceKind::Random) => EmbeddingMatrix::random(v, space.d_embed, space.seed)?,
        (None, SpaceKind::Bits) => EmbeddingMatrix::bits(v)?,
        (None, SpaceKind::Pretrained) => {
            train_skipgram(&data.train, v, space.d_embed, &space.skipgram, space.seed)?
        }
    };
    Ok(e.round_to_f32())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub space: SpaceKind,
    pub train_tokens: usize,
    pub validation_tokens: usize,
}

/// Writes `vocab.txt`, `embedding.bin` and a `config.toml` pointing at
/// both into `out_dir`.
pub fn prepare(cfg: &RunConfig, out_dir: &Path) -> Result<PrepareSummary> {
    cfg.validate()?;
    let data = load_corpus(&cfg.corpus, None)?;
    let e = build_space(cfg, &data)?;
    fs::create_dir_all(out_dir).map_err(|err| SedError::io(out_dir, err))?;
    data.vocab.save(&out_dir.join(crate::checkpoint::VOCAB_FILE))?;
    e.save(&out_dir.join(EMBEDDING_FILE))?;
    let mut out_cfg = cfg.clone();
    if let Some(p) = &out_cfg.corpus.path {
        out_cfg.corpus.path = Some(absolute(p));
    }
    out_cfg.corpus.vocab_path = Some(PathBuf::from(crate::checkpoint::VOCAB_FILE));
    out_cfg.space.embedding_path = Some(PathBuf::from(EMBEDDING_FILE));
    out_cfg.space.d_embed = e.dim();
    out_cfg.denoiser.d_embed = e.dim();
    out_cfg.save(&out_dir.join(CONFIG_FILE))?;
    Ok(PrepareSummary {
        vocab_size: data.vocab.size(),
        d_embed: e.dim(),
        space: cfg.space.kind,
        train_tokens: data.train.len(),
        validation_tokens: data.validation.len(),
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// How a training run starts and stops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from `out_dir/checkpoint`.
    pub resume: bool,
    /// Save a checkpoint and stop once this many steps are done.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps_done: usize,
    pub logged: Vec<StepMetrics>,
    pub last: Option<StepMetrics>,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    step: usize,
    error: String,
    last_logged: Option<&'a StepMetrics>,
    data_cursor: usize,
}

fn trainer_checkpoint(trainer: &Trainer, cfg: &RunConfig, vocab: &Vocab) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        vocab: vocab.clone(),
        embedding: trainer.embedding.clone(),
        model: trainer.model.clone(),
        optimizer: Some(trainer.optimizer.clone()),
        step: trainer.step,
        data_cursor: trainer.stream.cursor(),
        rng: Some(crate::training::RngState::capture(&trainer.rng)),
    }
}

/// Keeps the records of steps before `step`.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(|e| SedError::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| SedError::io(path, e))?;
        let record: serde_json::Value = serde_json::from_str(&line)?;
        if record["step"].as_u64().is_some_and(|s| (s as usize) < step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| SedError::io(path, e))
}

/// Trains into `out_dir`, writing the effective config, the schedule table,
/// one metrics record per logging interval and periodic checkpoints.
/// `on_log` sees every logged record.
///
/// A resumed run restores everything from the checkpoint except the total
/// step count, which comes from `cfg`.
pub fn train_run(
    cfg: &RunConfig,
    out_dir: &Path,
    options: RunOptions,
    on_log: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir).map_err(|e| SedError::io(out_dir, e))?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let deterministic = cfg.effective_determinism();

    let requested = cfg;
    let (cfg, vocab, mut trainer) = if options.resume {
        let ck = Checkpoint::load(&ckpt_dir)?;
        let mut cfg = ck.config.clone();
        cfg.train.steps = requested.train.steps.max(ck.step);
        let data = load_corpus(&cfg.corpus, Some(ck.vocab.clone()))?;
        let stream = TokenStream::with_cursor(data.train, ck.data_cursor)?;
        let mut trainer = Trainer::new(
            cfg.train.clone(),
            ck.model.clone(),
            ck.embedding.clone(),
            ck.schedule()?,
            stream,
        )?;
        trainer.optimizer = ck
            .optimizer
            .clone()
            .unwrap_or_else(|| AdamW::new(&ck.model.shapes()));
        trainer.step = ck.step;
        if let Some(state) = &ck.rng {
            trainer.rng = state.restore()?;
        }
        (cfg, ck.vocab, trainer)
    } else {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        if let Some(p) = &cfg.corpus.path {
            cfg.corpus.path = Some(absolute(p));
        }
        let data = load_corpus(&cfg.corpus, None)?;
        let e = build_space(&cfg, &data)?;
        cfg.space.d_embed = e.dim();
        cfg.denoiser.d_embed = e.dim();
        // the checkpoint carries both, so later runs need neither file
        cfg.corpus.vocab_path = None;
        cfg.space.embedding_path = None;
        let model = SedModel::init(&cfg.denoiser, &e, cfg.train.seed)?;
        let stream = TokenStream::new(data.train)?;
        let trainer = Trainer::new(cfg.train.clone(), model, e, cfg.schedule.build()?, stream)?;
        (cfg, data.vocab, trainer)
    };
    trainer.deterministic = deterministic;

    cfg.save(&out_dir.join(CONFIG_FILE))?;
    let sched_path = out_dir.join(SCHEDULE_FILE);
    fs::write(&sched_path, trainer.schedule.table()).map_err(|e| SedError::io(&sched_path, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    if options.resume {
        truncate_metrics(&metrics_path, trainer.step)?;
    } else if metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(|e| SedError::io(&metrics_path, e))?;
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| SedError::io(&metrics_path, e))?;

    let total = cfg.train.steps;
    let stop = options.stop_after.unwrap_or(total).min(total);
    let mut logged = Vec::new();
    let mut last = None;
    while trainer.step < stop {
        let metrics = match trainer.step() {
            Ok(m) => m,
            Err(err) => {
                let dump = FailureDump {
                    step: trainer.step,
                    error: err.to_string(),
                    last_logged: logged.last(),
                    data_cursor: trainer.stream.cursor(),
                };
                let path = out_dir.join(FAILURE_FILE);
                fs::write(&path, serde_json::to_string_pretty(&dump)?)
                    .map_err(|e| SedError::io(&path, e))?;
                return Err(err);
            }
        };
        let done = trainer.step;
        if metrics.step % cfg.train.log_every.max(1) == 0 || done == total {
            let line = serde_json::to_string(&metrics)?;
            writeln!(log, "{line}").map_err(|e| SedError::io(&metrics_path, e))?;
            on_log(&metrics);
            logged.push(metrics.clone());
        }
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < stop {
            trainer_checkpoint(&trainer, &cfg, &vocab).save(&ckpt_dir)?;
        }
        last = Some(metrics);
    }
    trainer_checkpoint(&trainer, &cfg, &vocab).save(&ckpt_dir)?;
    Ok(TrainSummary {
        steps_done: trainer.step,
        logged,
        last,
        checkpoint: ckpt_dir,
    })
}

/// Compiles an infill spec: text in which each `___N` marks a gap of `N`
/// tokens to generate. Everything else is tokenised and conditioned on.
/// In word mode a gap must stand as its own word.
pub fn compile_infill_spec(spec: &str, vocab: &Vocab) -> Result<(ConditioningMask, Vec<usize>)> {
    let bad = |detail: String| SedError::InvalidArgument(format!("infill spec: {detail}"));
    let mut mask = Vec::new();
    let mut tokens = Vec::new();
    let push_text = |text: &str, mask: &mut Vec<bool>, tokens: &mut Vec<usize>| {
        for id in vocab.encode(text).0 {
            mask.push(true);
            tokens.push(id);
        }
    };
    let mut rest = spec;
    while let Some(at) = rest.find("___") {
        push_text(&rest[..at], &mut mask, &mut tokens);
        let after = &rest[at + 3..];
        let digits = after.chars().take_while(char::is_ascii_digit).count();
        if digits == 0 {
            return Err(bad("every ___ needs a gap length, as in ___5".into()));
        }
        let n: usize = after[..digits].parse().map_err(|_| bad("gap length too large".into()))?;
        if n == 0 {
            return Err(bad("gap length must be positive".into()));
        }
        mask.extend(std::iter::repeat_n(false, n));
        tokens.extend(std::iter::repeat_n(crate::corpus::PAD_ID, n));
        rest = &after[digits..];
        if vocab.mode() == crate::corpus::TokenizerMode::Word {
            let glued_before = !spec[..spec.len() - after.len() - 3].is_empty()
                && !spec[..spec.len() - after.len() - 3].ends_with(char::is_whitespace);
            if glued_before || rest.starts_with(|c: char| !c.is_whitespace()) {
                return Err(bad("in word mode a gap must be separated by whitespace".into()));
            }
        }
    }
    push_text(rest, &mut mask, &mut tokens);
    if mask.is_empty() {
        return Err(bad("empty".into()));
    }
    Ok((ConditioningMask(mask), tokens))
}

/// Samples from a checkpoint's model.
pub fn sample_checkpoint(
    ck: &Checkpoint,
    request: &SampleRequest,
    steps: Option<usize>,
    trace: Option<TraceOptions>,
) -> Result<SampleOutput> {
    let schedule = ck.schedule()?;
    let sampler = Sampler::new(
        &ck.model.denoiser,
        &ck.model.readout,
        &ck.embedding,
        &schedule,
        steps,
    )?;
    match trace {
        Some(opts) => sampler.sample_with_trace(request, opts),
        None => sampler.sample(request),
    }
}

/// Output length used by sampling and evaluation.
pub fn sample_length(cfg: &RunConfig) -> usize {
    cfg.sample.length.unwrap_or(cfg.train.seq_len)
}

fn fingerprint(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Windows of `len` tokens cut from `tokens`, at least `min_count` of them
/// (wrapping around when the split is short).
fn windows(tokens: &[usize], len: usize, min_count: usize) -> Vec<TokenSeq> {
    let mut out: Vec<TokenSeq> = tokens.chunks_exact(len).map(|c| TokenSeq(c.to_vec())).collect();
    if out.len() < min_count && !tokens.is_empty() {
        let mut stream = TokenStream::new(tokens.to_vec()).expect("non-empty");
        out.clear();
        for _ in 0..min_count {
            out.push(TokenSeq((0..len).map(|_| stream.next_token()).collect()));
        }
    }
    out
}

/// Everything an evaluation needs besides the model.
pub struct EvalSetup {
    pub scorer: NGramScorer,
    pub validation: Vec<usize>,
    pub length: usize,
}

impl EvalSetup {
    /// Scorer trained on the checkpoint's training split.
    pub fn for_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let data = load_corpus(&ck.config.corpus, Some(ck.vocab.clone()))?;
        let scorer = NGramScorer::train(
            &[TokenSeq(data.train)],
            ck.vocab.size(),
            ck.config.eval.scorer_order,
            ck.config.eval.scorer_k,
        )?;
        if data.validation.is_empty() {
            return Err(SedError::Config("evaluation needs a non-empty validation split".into()));
        }
        Ok(Self {
            scorer,
            validation: data.validation,
            length: sample_length(&ck.config),
        })
    }
}

/// Samples at each guidance scale, scores them and adds the
/// validation-data reference row.
///
/// Unconditional generation has nothing to guide, so that task yields a
/// single row at scale 1. Suffix infilling conditions on the first
/// `prefix_fraction` of validation windows and measures only the generated
/// suffixes, against the true suffixes as reference.
pub fn eval_report(
    ck: &Checkpoint,
    setup: &EvalSetup,
    task: EvalTask,
    n_samples: usize,
    scales: &[f64],
    sample_steps: Option<usize>,
    seed: u64,
) -> Result<MetricReport> {
    if n_samples == 0 {
        return Err(SedError::InvalidArgument("need at least one sample".into()));
    }
    let len = setup.length;
    let space = ck.config.space.kind.as_str();
    let self_cond = ck.config.denoiser.self_condition;
    let schedule = ck.schedule()?;
    let sampler = Sampler::new(
        &ck.model.denoiser,
        &ck.model.readout,
        &ck.embedding,
        &schedule,
        sample_steps,
    )?;
    let mut rows = Vec::new();
    let reference = match task {
        EvalTask::Unconditional => {
            let out = sampler.sample(&SampleRequest::unconditional(len, n_samples, seed))?;
            rows.push(MetricRow::measure("sample", space, self_cond, Some(1.0), &out.samples, &setup.scorer)?);
            let data = windows(&setup.validation, len, 1);
            MetricRow::measure("data", space, self_cond, None, &data, &setup.scorer)?
        }
        EvalTask::SuffixInfill => {
            let prefix = ((len as f64) * ck.config.eval.prefix_fraction).floor() as usize;
            let data: Vec<TokenSeq> = windows(&setup.validation, len, n_samples)
                .into_iter()
                .take(n_samples)
                .collect();
            let mask = ConditioningMask((0..len).map(|i| i < prefix).collect());
            let chains: Vec<ChainSpec> = data
                .iter()
                .map(|w| ChainSpec {
                    mask: mask.clone(),
                    tokens: w.0.clone(),
                })
                .collect();
            let suffix = |s: &TokenSeq| TokenSeq(s.0[prefix..].to_vec());
            for &s in scales {
                let out = sampler.sample_chains(&chains, s, seed)?;
                let gen: Vec<TokenSeq> = out.samples.iter().map(suffix).collect();
                rows.push(MetricRow::measure("sample", space, self_cond, Some(s), &gen, &setup.scorer)?);
            }
            let truth: Vec<TokenSeq> = data.iter().map(suffix).collect();
            MetricRow::measure("data", space, self_cond, None, &truth, &setup.scorer)?
        }
    };
    Ok(MetricReport {
        task: match task {
            EvalTask::Unconditional => "unconditional".into(),
            EvalTask::SuffixInfill => "suffix-infill".into(),
        },
        checkpoint: ck.id(),
        config_fingerprint: fingerprint(&ck.config.to_toml_string()),
        scorer_fingerprint: setup.scorer.fingerprint()[..16].to_string(),
        scorer_order: setup.scorer.order(),
        vocab_size: ck.vocab.size(),
        reference,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn tiny_run_config(dir: &Path) -> RunConfig {
        let corpus = dir.join("corpus.txt");
        fs::write(&corpus, crate::synthetic::grammar_corpus(60, 1)).unwrap();
        let mut cfg = RunConfig::default();
        cfg.corpus.path = Some(corpus);
        cfg.space.d_embed = 8;
        cfg.schedule.steps = 50;
        cfg.denoiser = DenoiserConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            head_size: 8,
            max_len: 16,
            ..DenoiserConfig::default()
        };
        cfg.train.steps = 6;
        cfg.train.seq_len = 16;
        cfg.train.batch_tokens = 64;
        cfg.train.log_every = 2;
        cfg.train.checkpoint_every = 3;
        cfg.train.optimizer.warmup_steps = 2;
        cfg.deterministic = true;
        cfg
    }

    #[test]
    fn infill_spec_compiles_gaps() {
        let vocab = Vocab::build("the cat sat on the mat", 50, crate::corpus::TokenizerMode::Char).unwrap();
        let (mask, tokens) = compile_infill_spec("the ___3 sat", &vocab).unwrap();
        assert_eq!(mask.to_bit_string(), "11110001111");
        assert_eq!(tokens.len(), 11);
        assert_eq!(&tokens[..4], vocab.encode("the ").ids());
        let (mask, tokens) = compile_infill_spec("the cat", &vocab).unwrap();
        assert!(mask.0.iter().all(|&b| b));
        assert_eq!(vocab.decode(&tokens, true), "the cat");
        assert!(compile_infill_spec("a ___ b", &vocab).is_err());
        assert!(compile_infill_spec("a ___0 b", &vocab).is_err());
        assert!(compile_infill_spec("", &vocab).is_err());

        let words = Vocab::build("the cat sat on the mat", 50, crate::corpus::TokenizerMode::Word).unwrap();
        let (mask, tokens) = compile_infill_spec("the ___2 on the mat", &words).unwrap();
        assert_eq!(mask.to_bit_string(), "100111");
        assert_eq!(tokens[0], words.id("the").unwrap());
        assert!(compile_infill_spec("the___2 on", &words).is_err());
    }

    #[test]
    fn split_holds_out_every_nth_line() {
        let text = "a\nb\nc\nd\ne\nf\ng\nh\ni\nj\n";
        let (train, val) = split_lines(text, 0.1);
        assert_eq!(val, "j\n");
        assert_eq!(train.lines().count(), 9);
        let (train, val) = split_lines(text, 0.0);
        assert_eq!((train.as_str(), val.as_str()), (text, ""));
    }

    #[test]
    fn prepare_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let summary = prepare(&cfg, &a).unwrap();
        prepare(&cfg, &b).unwrap();
        assert_eq!(summary.d_embed, 8);
        assert_eq!(
            fs::read(a.join(EMBEDDING_FILE)).unwrap(),
            fs::read(b.join(EMBEDDING_FILE)).unwrap()
        );
        let reread = RunConfig::load(&a.join(CONFIG_FILE)).unwrap();
        let data = load_corpus(&reread.corpus, None).unwrap();
        assert_eq!(data.vocab.size(), summary.vocab_size);
        assert_eq!(build_space(&reread, &data).unwrap().dim(), 8);
    }

    #[test]
    fn bits_space_ignores_d() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.space.kind = SpaceKind::Bits;
        cfg.space.d_embed = 99;
        let summary = prepare(&cfg, &dir.path().join("p")).unwrap();
        assert_eq!(summary.d_embed, crate::embedding::bits_dimension(summary.vocab_size));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let full = dir.path().join("full");
        let split = dir.path().join("split");
        let a = train_run(&cfg, &full, RunOptions::default(), &mut |_| {}).unwrap();
        let first = RunOptions {
            resume: false,
            stop_after: Some(4),
        };
        train_run(&cfg, &split, first, &mut |_| {}).unwrap();
        let resume = RunOptions {
            resume: true,
            stop_after: None,
        };
        let b = train_run(&cfg, &split, resume, &mut |_| {}).unwrap();
        assert_eq!(a.steps_done, 6);
        assert_eq!(b.steps_done, 6);
        assert_eq!(a.last, b.last);
        assert_eq!(
            fs::read_to_string(full.join(METRICS_FILE)).unwrap(),
            fs::read_to_string(split.join(METRICS_FILE)).unwrap()
        );
        assert_eq!(
            Checkpoint::load(&a.checkpoint).unwrap(),
            Checkpoint::load(&b.checkpoint).unwrap()
        );
        let steps: Vec<usize> = a.logged.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 2, 4, 5]);
    }

    #[test]
    fn eval_report_has_reference_row_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let run = train_run(&cfg, &dir.path().join("run"), RunOptions::default(), &mut |_| {}).unwrap();
        let ck = Checkpoint::load(&run.checkpoint).unwrap();
        let setup = EvalSetup::for_checkpoint(&ck).unwrap();
        let a = eval_report(&ck, &setup, EvalTask::SuffixInfill, 3, &[1.0, 2.0], Some(10), 4).unwrap();
        let b = eval_report(&ck, &setup, EvalTask::SuffixInfill, 3, &[1.0, 2.0], Some(10), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.reference.label, "data");
        assert!(a.to_table().lines().nth(1).unwrap().contains("data"));
        let u = eval_report(&ck, &setup, EvalTask::Unconditional, 2, &[1.0, 8.0], Some(10), 4).unwrap();
        assert_eq!(u.rows.len(), 1);
        assert!(u.reference.unigram_entropy <= (ck.vocab.size() as f64).ln());
    }
}
