//! Argument parsing and subcommand handlers for `ts`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tsuggest::aligner::{format_links, BidirectionalAligner, EmOptions, SymmetrizeMode};
use tsuggest::corpus_io::{read_ts_file, tokenize, write_ts_file, TsExample};
use tsuggest::decoder_search::BeamConfig;
use tsuggest::encoding::corpus_pairs;
use tsuggest::evaluator::{write_dump, BleuMode};
use tsuggest::model::checkpoint::Checkpoint;
use tsuggest::model::{Flags, ModelConfig, SaTransformer};
use tsuggest::ngram_lm::{train_lm, NGramModel, Smoothing};
use tsuggest::subword::{learn_bpe, BpeOptions, SubwordModel};
use tsuggest::suggest::Suggester;
use tsuggest::synth::{
    extract_alignment_based, sample_golden, sample_pseudo, InitialLetters, Method, SamplerConfig, SynthOutput,
    Translations, Triple,
};
use tsuggest::toy::{make_toy, ToyConfig};
use tsuggest::trainer::{self, Phase, TrainConfig, Trainer, LAST_CHECKPOINT, OPTIMIZER_STATE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// A flag-level problem, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "ts", version, about = "Translation suggestion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn BPE merges and the shared vocabulary
    LearnBpe(LearnBpeArgs),
    /// Segment a text file with learned merges
    ApplyBpe(ApplyBpeArgs),
    /// Train an n-gram language model
    TrainLm(TrainLmArgs),
    /// Word-align a parallel corpus
    Align(AlignArgs),
    /// Build a synthetic suggestion corpus
    BuildSynth(BuildSynthArgs),
    /// Generate the digit-language benchmark
    MakeToy(MakeToyArgs),
    /// Pretrain on synthetic corpora
    Pretrain(PretrainArgs),
    /// Fine-tune on golden suggestion data
    Finetune(FinetuneArgs),
    /// Suggest alternatives for one span
    Suggest(SuggestArgs),
    /// Score top-1 suggestions on a test set
    Evaluate(EvaluateArgs),
    /// Serve suggestions over HTTP
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct SeedArg {
    /// Random seed (falls back to TS_SEED, then 1)
    #[arg(long, env = "TS_SEED", default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct LearnBpeArgs {
    /// Text files (one sentence per line) or .jsonl suggestion files
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    pub merges: usize,
    #[arg(long, default_value_t = 2)]
    pub min_frequency: u64,
    #[arg(long)]
    pub out_merges: PathBuf,
    #[arg(long)]
    pub out_vocab: PathBuf,
}

#[derive(Args, Debug)]
pub struct ApplyBpeArgs {
    #[arg(long)]
    pub merges: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (stdout when absent)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    /// mle | kn | auto | addk[:k]
    #[arg(long, default_value = "auto")]
    pub smoothing: String,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub iterations: usize,
    /// intersection | union | grow-diag | grow-diag-final | grow-diag-final-and
    #[arg(long, default_value = "grow-diag-final-and")]
    pub symmetrize: String,
    /// Links file, one line of `i-j` pairs per sentence
    #[arg(long)]
    pub output: PathBuf,
    /// Also write consistent phrase pairs as JSON lines
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub max_phrase_len: usize,
}

#[derive(Args, Debug)]
pub struct BuildSynthArgs {
    /// golden | pseudo | align
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub src: PathBuf,
    /// Reference translations (golden, align)
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Machine translations (pseudo, align)
    #[arg(long)]
    pub mt: Option<PathBuf>,
    /// Target-side language model (align)
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Perplexity margin for the align method
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 6)]
    pub max_span_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub p_null: f64,
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub p_hint: f64,
    #[arg(long, default_value_t = 5)]
    pub align_iterations: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Args, Debug)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 500)]
    pub golden_train: usize,
    #[arg(long, default_value_t = 200)]
    pub golden_dev: usize,
    #[arg(long, default_value_t = 500)]
    pub golden_test: usize,
    #[arg(long, default_value_t = 0.15)]
    pub mt_error_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub p_hint: f64,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// TOML file with [model] and [train] tables; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Render hint segments of examples that carry one
    #[arg(long)]
    pub hints: bool,
    /// BLEU flavour for dev evaluation: word | char
    #[arg(long)]
    pub bleu_mode: Option<String>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Metrics log (JSON lines)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Seed (falls back to TS_SEED, then the config file)
    #[arg(long, env = "TS_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_independent_positions: bool,
    #[arg(long)]
    pub no_segment_embedding: bool,
    #[arg(long)]
    pub no_segment_attention: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Synthetic corpora (.jsonl), concatenated and shuffled
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub merges: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Start from an existing checkpoint instead of random init
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue from last.ck and last.state in this directory
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint
    #[arg(long, required_unless_present = "from_scratch")]
    pub model: Option<PathBuf>,
    /// Random init instead of a pretrained model (needs --merges and --vocab)
    #[arg(long, conflicts_with = "model")]
    pub from_scratch: bool,
    #[arg(long)]
    pub merges: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub train_file: PathBuf,
    #[arg(long)]
    pub dev_file: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct BeamFlags {
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
}

impl BeamFlags {
    pub fn config(&self) -> anyhow::Result<BeamConfig> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(usage("--beam and --max-len must be at least 1"));
        }
        Ok(BeamConfig { beam_size: self.beam, max_len: self.max_len, alpha: self.alpha })
    }
}

impl ServeArgs {
    pub fn beam_config(&self) -> anyhow::Result<BeamConfig> {
        self.beam.config()
    }
}

#[derive(Args, Debug)]
pub struct SuggestArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub translation: String,
    /// Word span `i,j` of the translation (i == j inserts)
    #[arg(long)]
    pub span: String,
    /// Initials of the wanted alternative, space separated
    #[arg(long)]
    pub hint: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[command(flatten)]
    pub beam: BeamFlags,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// word | char
    #[arg(long, default_value = "word")]
    pub mode: String,
    /// Feed hints present in the test file
    #[arg(long)]
    pub hints: bool,
    /// Per-example JSON lines {input, top_k, gold, sentence_bleu}
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Suggestions listed per example in the dump
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[command(flatten)]
    pub beam: BeamFlags,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Checkpoint to load; without it /suggest answers 503
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8077)]
    pub port: u16,
    /// Static workbench files served under /ui
    #[arg(long, default_value = "workbench_ui/dist")]
    pub ui: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, default_value_t = 10)]
    pub timeout_secs: u64,
    #[command(flatten)]
    pub beam: BeamFlags,
}

/// Parses `argv` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            code
        }
    }
}

/// 1 for flag problems, 2 for everything data related.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<tsuggest::Error>() {
        Some(tsuggest::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::LearnBpe(a) => learn_bpe_cmd(a),
        Command::ApplyBpe(a) => apply_bpe_cmd(a),
        Command::TrainLm(a) => train_lm_cmd(a),
        Command::Align(a) => align_cmd(a),
        Command::BuildSynth(a) => build_synth_cmd(a),
        Command::MakeToy(a) => make_toy_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Suggest(a) => suggest_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Serve(a) => crate::server::serve_cmd(a),
    }
}

fn echo<T: Serialize>(what: &str, value: &T) {
    eprintln!("{what}: {}", serde_json::to_string(value).unwrap_or_default());
}

/// Prints the resolved configuration to stderr.
pub fn echo_config<T: Serialize>(value: &T) {
    echo("config", value);
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(tokenize(&l.with_context(|| format!("reading {}", path.display()))?)))
        .collect()
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_subword(merges: Option<&Path>, vocab: Option<&Path>) -> anyhow::Result<SubwordModel> {
    match (merges, vocab) {
        (Some(m), Some(v)) => Ok(SubwordModel::load(m, v)?),
        _ => Err(usage("--merges and --vocab are both required")),
    }
}

fn learn_bpe_cmd(a: LearnBpeArgs) -> anyhow::Result<()> {
    let opts = BpeOptions { num_merges: a.merges, min_frequency: a.min_frequency };
    echo("config", &serde_json::json!({"merges": a.merges, "min_frequency": a.min_frequency, "input": a.input}));
    let mut corpus = Vec::new();
    for path in &a.input {
        if is_jsonl(path) {
            for ex in read_ts_file(path).with_context(|| format!("reading {}", path.display()))? {
                corpus.push(ex.source);
                corpus.push(ex.translation);
                corpus.extend(ex.alternatives);
                corpus.extend(ex.hint);
            }
        } else {
            corpus.extend(read_lines(path)?);
        }
    }
    let sw = learn_bpe(&corpus, opts)?;
    sw.save(&a.out_merges, &a.out_vocab)?;
    eprintln!("learned {} merges, vocabulary {}", sw.merges().len(), sw.vocab().len());
    Ok(())
}

fn apply_bpe_cmd(a: ApplyBpeArgs) -> anyhow::Result<()> {
    let sw = SubwordModel::load(&a.merges, &a.vocab)?;
    let lines = read_lines(&a.input)?;
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for l in lines {
        writeln!(out, "{}", sw.apply_bpe(&l).join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn train_lm_cmd(a: TrainLmArgs) -> anyhow::Result<()> {
    let smoothing: Smoothing = a.smoothing.parse().map_err(|e| usage(format!("--smoothing: {e}")))?;
    if a.order == 0 {
        return Err(usage("--order must be at least 1"));
    }
    echo("config", &serde_json::json!({"order": a.order, "smoothing": a.smoothing}));
    let corpus = read_lines(&a.input)?;
    let lm = train_lm(&corpus, a.order, smoothing)?;
    lm.save(&a.output)?;
    eprintln!("trained order-{} model over {} words", lm.order(), lm.vocab_size());
    Ok(())
}

fn bitext(src: &Path, tgt: &Path) -> anyhow::Result<Vec<(Vec<String>, Vec<String>)>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(tsuggest::Error::LengthMismatch(format!("{} source lines, {} target lines", s.len(), t.len())).into());
    }
    Ok(s.into_iter().zip(t).collect())
}

fn align_cmd(a: AlignArgs) -> anyhow::Result<()> {
    let mode: SymmetrizeMode = a.symmetrize.parse().map_err(|e| usage(format!("--symmetrize: {e}")))?;
    if a.iterations == 0 || a.max_phrase_len == 0 {
        return Err(usage("--iterations and --max-phrase-len must be at least 1"));
    }
    echo("config", &serde_json::json!({"iterations": a.iterations, "symmetrize": a.symmetrize, "max_phrase_len": a.max_phrase_len}));
    let pairs = bitext(&a.src, &a.tgt)?;
    let mut al = BidirectionalAligner::train(&pairs, EmOptions { iterations: a.iterations, diagonal: None })?;
    al.mode = mode;
    al.max_phrase_len = a.max_phrase_len;
    let mut out = create(&a.output)?;
    let mut phrases = a.phrases.as_deref().map(create).transpose()?;
    for (s, t) in &pairs {
        writeln!(out, "{}", format_links(&al.align(s, t)))?;
        if let Some(w) = &mut phrases {
            for p in al.phrase_pairs(s, t) {
                let rec = serde_json::json!({
                    "src": [p.src.0, p.src.1],
                    "tgt": [p.tgt.0, p.tgt.1],
                    "src_text": s[p.src.0..p.src.1].join(" "),
                    "tgt_text": t[p.tgt.0..p.tgt.1].join(" "),
                });
                writeln!(w, "{rec}")?;
            }
        }
    }
    out.flush()?;
    if let Some(mut w) = phrases {
        w.flush()?;
    }
    Ok(())
}

fn write_synth(out: &SynthOutput, path: &Path) -> anyhow::Result<()> {
    write_ts_file(&out.examples, path)?;
    let stats = path.with_extension("stats.json");
    std::fs::write(&stats, out.stats_json()).with_context(|| format!("writing {}", stats.display()))?;
    let mut prov = create(&path.with_extension("provenance.jsonl"))?;
    for p in &out.provenance {
        writeln!(prov, "{}", serde_json::to_string(p)?)?;
    }
    prov.flush()?;
    eprintln!("{} examples -> {}", out.examples.len(), path.display());
    Ok(())
}

fn build_synth_cmd(a: BuildSynthArgs) -> anyhow::Result<()> {
    let method: Method = a.method.parse().map_err(|e| usage(format!("--method: {e}")))?;
    let cfg = SamplerConfig {
        max_span_len: a.max_span_len,
        p_null: a.p_null,
        samples_per_sentence: a.samples,
        seed: a.seed.seed,
        beta: a.beta,
        p_hint: a.p_hint,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let need = |p: &Option<PathBuf>, flag: &str| -> anyhow::Result<PathBuf> {
        p.clone().ok_or_else(|| usage(format!("--method {} needs {flag}", method.as_str())))
    };
    let (reference, mt, lm) = match method {
        Method::Golden => (Some(need(&a.reference, "--ref")?), None, None),
        Method::Pseudo => (None, Some(need(&a.mt, "--mt")?), None),
        Method::Align => (Some(need(&a.reference, "--ref")?), Some(need(&a.mt, "--mt")?), Some(need(&a.lm, "--lm")?)),
    };
    echo("config", &serde_json::json!({"method": method.as_str(), "sampler": cfg, "align_iterations": a.align_iterations}));
    let sources = read_lines(&a.src)?;
    let out = match method {
        Method::Golden => {
            let refs = read_lines(reference.as_deref().unwrap())?;
            if refs.len() != sources.len() {
                return Err(tsuggest::Error::LengthMismatch(format!("{} sources, {} references", sources.len(), refs.len())).into());
            }
            let pairs: Vec<(Vec<String>, Vec<String>)> = sources.into_iter().zip(refs).collect();
            sample_golden(&pairs, &cfg, &InitialLetters)?
        }
        Method::Pseudo => {
            let mt = read_lines(mt.as_deref().unwrap())?;
            sample_pseudo(&sources, Translations::Pretranslated(&mt), &cfg, &InitialLetters)?
        }
        Method::Align => {
            let refs = read_lines(reference.as_deref().unwrap())?;
            let mt = read_lines(mt.as_deref().unwrap())?;
            if refs.len() != sources.len() || mt.len() != sources.len() {
                return Err(tsuggest::Error::LengthMismatch(format!(
                    "{} sources, {} MT lines, {} references",
                    sources.len(),
                    mt.len(),
                    refs.len()
                ))
                .into());
            }
            let lm = NGramModel::load(lm.as_deref().unwrap())?;
            let bi: Vec<(&[String], &[String])> = mt.iter().zip(&refs).map(|(m, r)| (m.as_slice(), r.as_slice())).collect();
            let aligner = BidirectionalAligner::train(&bi, EmOptions { iterations: a.align_iterations, diagonal: None })?;
            let triples: Vec<Triple> = sources.into_iter().zip(mt).zip(refs).map(|((x, m), r)| (x, m, r)).collect();
            extract_alignment_based(&triples, &aligner, &lm, &cfg, &InitialLetters)?
        }
    };
    write_synth(&out, &a.out)
}

fn make_toy_cmd(a: MakeToyArgs) -> anyhow::Result<()> {
    let cfg = ToyConfig {
        seed: a.seed.seed,
        pairs: a.pairs,
        golden_train: a.golden_train,
        golden_dev: a.golden_dev,
        golden_test: a.golden_test,
        mt_error_rate: a.mt_error_rate,
        p_hint: a.p_hint,
        ..ToyConfig::default()
    };
    if !(0.0..=1.0).contains(&cfg.mt_error_rate) || !(0.0..=1.0).contains(&cfg.p_hint) {
        return Err(usage("--mt-error-rate and --p-hint must lie in [0, 1]"));
    }
    echo("config", &cfg);
    let toy = make_toy(&cfg)?;
    toy.write(&a.out)?;
    std::fs::write(a.out.join("toy.json"), serde_json::to_string_pretty(&cfg)?)?;
    eprintln!("wrote benchmark to {}", a.out.display());
    Ok(())
}

/// Defaults, overlaid with the config file, overlaid with flags.
fn resolve_config(flags: &TrainFlags, base_train: TrainConfig, base_model: ModelConfig) -> anyhow::Result<(TrainConfig, ModelConfig)> {
    let (mut train, mut model) = (base_train, base_model);
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for key in file.keys() {
            if key != "model" && key != "train" {
                return Err(usage(format!("{}: unknown table [{key}]", path.display())));
            }
        }
        fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, patch: Option<&toml::Value>) -> anyhow::Result<T> {
            let Some(patch) = patch else { return Ok(serde_json::from_value(serde_json::to_value(base)?)?) };
            let mut v = serde_json::to_value(base)?;
            let p = serde_json::to_value(patch)?;
            merge(&mut v, p);
            serde_json::from_value(v).map_err(|e| usage(format!("config: {e}")))
        }
        train = overlay(&train, file.get("train"))?;
        model = overlay(&model, file.get("model"))?;
    }
    let f = flags;
    macro_rules! set {
        ($field:ident, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                train.$field = v;
            }
        };
    }
    set!(max_steps, f.steps);
    set!(batch_tokens, f.batch_tokens);
    set!(lr, f.lr);
    set!(warmup_steps, f.warmup);
    set!(eval_interval, f.eval_interval);
    set!(seed, f.seed);
    if f.clip_norm.is_some() {
        train.clip_norm = f.clip_norm;
    }
    if f.checkpoint_dir.is_some() {
        train.checkpoint_dir = f.checkpoint_dir.clone();
    }
    if let Some(m) = &f.bleu_mode {
        train.bleu_mode = m.parse().map_err(|e| usage(format!("--bleu-mode: {e}")))?;
    }
    train.use_hints |= f.hints;
    model.flags = Flags {
        independent_positions: model.flags.independent_positions && !f.no_independent_positions,
        segment_embedding_in_input: model.flags.segment_embedding_in_input && !f.no_segment_embedding,
        segment_aware_attention: model.flags.segment_aware_attention && !f.no_segment_attention,
    };
    train.validate().map_err(|e| usage(e.to_string()))?;
    Ok((train, model))
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn read_corpora(paths: &[PathBuf]) -> anyhow::Result<Vec<Vec<TsExample>>> {
    paths
        .iter()
        .map(|p| read_ts_file(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn metrics_sink(path: &Option<PathBuf>) -> anyhow::Result<Option<BufWriter<File>>> {
    path.as_deref().map(create).transpose()
}

fn pretrain_cmd(a: PretrainArgs) -> anyhow::Result<()> {
    let (cfg, model_cfg) = resolve_config(&a.train, TrainConfig::pretrain(), ModelConfig::default())?;
    let cfg = TrainConfig { phase: Phase::Pretrain, ..cfg };
    let (mut ck, trainer) = if let Some(dir) = &a.resume {
        let ck = Checkpoint::load(&dir.join(LAST_CHECKPOINT))?;
        let state = std::fs::read(dir.join(OPTIMIZER_STATE)).with_context(|| format!("reading {}", dir.join(OPTIMIZER_STATE).display()))?;
        let t = Trainer::from_bytes(&state, ck.model.params())?;
        // the stream and schedule stay as saved; only the horizon and output move
        let resumed = TrainConfig { max_steps: cfg.max_steps, checkpoint_dir: cfg.checkpoint_dir.clone(), ..t.config().clone() };
        (ck, Some(t.with_config(resumed)?))
    } else if let Some(init) = &a.init {
        (Checkpoint::load(init)?, None)
    } else {
        let sw = load_subword(a.merges.as_deref(), a.vocab.as_deref())?;
        let mc = ModelConfig { vocab_size: sw.vocab().len(), ..model_cfg };
        mc.validate().map_err(|e| usage(e.to_string()))?;
        (Checkpoint { model: SaTransformer::new(mc, cfg.seed)?, subword: Some(sw) }, None)
    };
    let sw = ck.subword.clone().ok_or_else(|| anyhow!("checkpoint has no subword model"))?;
    echo("config", &serde_json::json!({"train": cfg, "model": ck.model.config(), "seed": cfg.seed}));
    let corpora = read_corpora(&a.corpus)?;
    let pairs = corpora
        .iter()
        .map(|c| corpus_pairs(&sw, c, cfg.use_hints))
        .collect::<tsuggest::Result<Vec<_>>>()?;
    let mut sink = metrics_sink(&a.train.metrics)?;
    let report = match trainer {
        Some(t) => trainer::resume_pretrain(&mut ck, t, &pairs, sink.as_mut().map(|w| w as &mut dyn Write))?,
        None => trainer::pretrain(&mut ck, &pairs, &cfg, sink.as_mut().map(|w| w as &mut dyn Write))?,
    };
    if let Some(mut w) = sink {
        w.flush()?;
    }
    let losses = report.train_losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("pretrain: {} steps, loss {first:.4} -> {last:.4}", losses.len());
    }
    ck.save(&a.out)?;
    eprintln!("model {} -> {}", ck.model_id()?, a.out.display());
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> anyhow::Result<()> {
    let (cfg, model_cfg) = resolve_config(&a.train, TrainConfig::finetune(), ModelConfig::default())?;
    let cfg = TrainConfig { phase: Phase::Finetune, ..cfg };
    let mut ck = match &a.model {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let sw = load_subword(a.merges.as_deref(), a.vocab.as_deref())?;
            let mc = ModelConfig { vocab_size: sw.vocab().len(), ..model_cfg };
            mc.validate().map_err(|e| usage(e.to_string()))?;
            Checkpoint { model: SaTransformer::new(mc, cfg.seed)?, subword: Some(sw) }
        }
    };
    echo("config", &serde_json::json!({"train": cfg, "model": ck.model.config(), "seed": cfg.seed, "from_scratch": a.from_scratch}));
    let train = read_ts_file(&a.train_file).with_context(|| format!("reading {}", a.train_file.display()))?;
    let dev = read_ts_file(&a.dev_file).with_context(|| format!("reading {}", a.dev_file.display()))?;
    let mut sink = metrics_sink(&a.train.metrics)?;
    let report = trainer::finetune(&mut ck, &train, &dev, &cfg, sink.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = sink {
        w.flush()?;
    }
    if let Some(b) = &report.best {
        eprintln!("best dev BLEU {:.2} at step {} (dev loss {:.4})", b.bleu, b.step, b.loss);
    }
    ck.save(&a.out)?;
    eprintln!("model {} -> {}", ck.model_id()?, a.out.display());
    Ok(())
}

/// Parses `i,j` (also `i:j`).
pub fn parse_span(s: &str) -> anyhow::Result<(usize, usize)> {
    let (i, j) = s.split_once([',', ':']).ok_or_else(|| usage(format!("--span {s:?}: expected i,j")))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|_| usage(format!("--span {s:?}: expected i,j")));
    Ok((p(i)?, p(j)?))
}

fn load_suggester(path: &Path, beam: BeamConfig) -> anyhow::Result<Suggester> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Suggester::from_checkpoint(ck, beam)?)
}

fn suggest_cmd(a: SuggestArgs) -> anyhow::Result<()> {
    let beam = a.beam.config()?;
    let span = parse_span(&a.span)?;
    if a.k == 0 || a.k > beam.beam_size {
        return Err(usage(format!("--k must be in 1..={}", beam.beam_size)));
    }
    echo("config", &serde_json::json!({"beam": beam, "k": a.k}));
    let s = load_suggester(&a.model, beam)?;
    let source = tokenize(&a.source);
    let translation = tokenize(&a.translation);
    let hint = a.hint.as_deref().map(tokenize);
    let out = s.suggest(&source, &translation, span, hint.as_deref(), a.k)?;
    if out.truncated {
        eprintln!("warning: no hypothesis finished within --max-len");
    }
    let mut stdout = std::io::stdout().lock();
    for sug in &out.suggestions {
        writeln!(stdout, "{:.4}\t{}", sug.score, sug.text)?;
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let mode: BleuMode = a.mode.parse().map_err(|e| usage(format!("--mode: {e}")))?;
    let beam = a.beam.config()?;
    if a.k == 0 || a.k > beam.beam_size {
        return Err(usage(format!("--k must be in 1..={}", beam.beam_size)));
    }
    echo("config", &serde_json::json!({"beam": beam, "mode": mode, "hints": a.hints, "k": a.k}));
    let s = load_suggester(&a.model, beam)?;
    let test = read_ts_file(&a.test).with_context(|| format!("reading {}", a.test.display()))?;
    let ev = s.evaluate(&test, mode, a.hints, a.k)?;
    if let Some(p) = &a.dump {
        let mut w = create(p)?;
        write_dump(&ev.dump, &mut w)?;
        w.flush()?;
    }
    println!("{}", ev.report);
    println!(
        "{}",
        serde_json::json!({
            "bleu": ev.report,
            "exact_match": ev.exact_match,
            "examples": ev.examples,
            "truncated": ev.truncated,
            "mode": mode,
            "model_id": s.model_id(),
        })
    );
    Ok(())
}
