//! The `dialplan` command line. Every subcommand that writes an artifact
//! also writes `<artifact>.manifest.json` with the command line, the
//! resolved configuration and SHA-256 digests of inputs and outputs.

use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dialplan_core::annotate::{
    annotate_corpus, build_topical_vocabulary, train_classifier, Annotator, LinearClassifier, TopicalVocabulary, TrainOptions,
};
use dialplan_core::corpus::{load_corpus, load_split, save_corpus, AnnotatedSession, Split};
use dialplan_core::decode::{Decoder, DecodingPolicy, GenerationTrace, HistoryEntry};
use dialplan_core::eval::{
    evaluate_generation, evaluate_understanding, BleuUnit, EmbeddingTable, EvalMode, EvalResources, MetricReport,
    PieceSegmenter, TableRow, UnderstandingReport,
};
use dialplan_core::labels::{DialogueAct, Emotion, Label, Speaker};
use dialplan_core::linearize::{training_examples, LinearizationScheme, Tokenizer};
use dialplan_core::model::{evaluate_ppl, ModelCheckpoint, ModelConfig, PplScope, TrainSchedule};
use dialplan_core::pipeline::train_checkpoint;
use dialplan_core::toy::{self, ToyConfig};
use dialplan_service::{cors, router, ChatService, Engine};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Directory of cached checkpoints, keyed by a digest of everything that
/// determines training.
pub const CACHE_ENV: &str = "DIALPLAN_CHECKPOINT_CACHE";

#[derive(Parser, Debug)]
#[command(name = "dialplan", version, about = "Dialogue generation with explicit understanding and planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
pub enum Command {
    /// Write the synthetic toy corpus and classifier training sentences.
    Toy(ToyArgs),
    /// Train a sentence classifier for dialogue acts or emotions.
    TrainClassifier(TrainClassifierArgs),
    /// Label a corpus with topical words, dialogue acts and emotions.
    Annotate(AnnotateArgs),
    /// Train a model on an annotated corpus.
    Train(TrainArgs),
    /// Generate machine turns for a corpus or a single message.
    Generate(GenerateArgs),
    /// Score generated machine turns against a corpus.
    Eval(EvalArgs),
    /// Serve the chat API.
    Serve(ServeArgs),
    /// Print the effective decoding policy.
    Policy(PolicyArgs),
}

/// Ablations, named after the rows of the ablation table.
#[derive(Args, Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the human semantic spans.
    #[arg(long)]
    pub no_understanding: bool,
    /// Drop the machine semantic spans.
    #[arg(long)]
    pub no_planning: bool,
    /// Allow repeated n-grams in planned topical words.
    #[arg(long)]
    pub no_repetition_constraint: bool,
    /// Let planned topical words end at any length.
    #[arg(long)]
    pub no_topical_min_length: bool,
}

impl Ablation {
    pub fn variant(&self) -> String {
        let parts: Vec<&str> = [
            (self.no_understanding, "w/o understanding"),
            (self.no_planning, "w/o planning"),
            (self.no_topical_min_length, "w/o topical words min length"),
            (self.no_repetition_constraint, "w/o repetition constraint"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(", ")
        }
    }

    pub fn apply(&self, policy: &mut DecodingPolicy) {
        if self.no_understanding {
            policy.use_understanding = false;
        }
        if self.no_planning {
            policy.use_planning = false;
        }
        if self.no_repetition_constraint {
            policy.planning.repetition_constraint.enabled = false;
        }
        if self.no_topical_min_length {
            policy.planning.topical.min = 0;
        }
    }

    pub fn apply_scheme(&self, scheme: &mut LinearizationScheme) {
        scheme.include_understanding &= !self.no_understanding;
        scheme.include_planning &= !self.no_planning;
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ToyArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON generator settings; unset fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    DialogueAct,
    Emotion,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainClassifierArgs {
    /// Tab-separated `label<TAB>sentence` lines.
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ClassifierKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Size limit of the topical vocabulary built from the corpus.
    #[arg(long, default_value_t = 6000)]
    pub vocab_size: usize,
    /// Use this vocabulary instead of building one.
    #[arg(long, conflicts_with = "stoplist")]
    pub vocab: Option<PathBuf>,
    /// Pieces never taken as topical words, one per line.
    #[arg(long)]
    pub stoplist: Option<PathBuf>,
    #[arg(long)]
    pub da_clf: PathBuf,
    #[arg(long)]
    pub emo_clf: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small model and fast schedule for the toy corpus.
    Toy,
    /// Desk-scale model and the full schedule.
    Desk,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Directory holding train.jsonl and valid.jsonl.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// JSON model configuration; overrides the preset.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON training schedule; overrides the preset.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub ablation: Ablation,
    /// Checkpoint cache directory; defaults to $DIALPLAN_CHECKPOINT_CACHE.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON decoding policy; unset fields keep their defaults.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: Ablation,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Answer every human utterance of these sessions.
    #[arg(long, required_unless_present = "text", conflicts_with = "text")]
    pub corpus: Option<PathBuf>,
    /// Answer a single message.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value = "")]
    pub context: String,
    /// JSON lines of traces.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Planned,
    Gold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitArg {
    Word,
    Char,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Annotated sessions to evaluate on.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Planned)]
    pub mode: ModeArg,
    /// `phrase<TAB>numbers` table; a seeded random table over the
    /// vocabulary is used when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Classifiers for the labels of generated responses.
    #[arg(long, requires = "emo_clf")]
    pub da_clf: Option<PathBuf>,
    #[arg(long, requires = "da_clf")]
    pub emo_clf: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = UnitArg::Word)]
    pub bleu_unit: UnitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Allowed CORS origin; any origin when absent.
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Sessions are loaded from here at start and saved here on shutdown.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct PolicyArgs {
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub notes: Vec<String>,
}

/// Report written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub mode: EvalMode,
    pub seed: u64,
    pub policy: DecodingPolicy,
    pub table: TableRow,
    pub understanding: Option<UnderstandingReport>,
    pub metrics: MetricReport,
}

/// One line of `generate` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTurn {
    pub session_id: Option<String>,
    pub utterance: Option<usize>,
    pub trace: GenerationTrace,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn digests(paths: &[&Path]) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| Ok(FileDigest { path: p.to_path_buf(), sha256: sha256_file(p)? })).collect()
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn write_manifest(
    artifact: &Path,
    argv: &[String],
    config: &impl Serialize,
    inputs: &[&Path],
    outputs: &[&Path],
    notes: Vec<String>,
) -> Result<()> {
    let manifest = Manifest {
        tool: "dialplan".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        argv: argv.to_vec(),
        config: serde_json::to_value(config)?,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
        notes,
    };
    write_json(&manifest_path(artifact), &manifest)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).with_context(|| format!("creating {}", p.display())),
        _ => Ok(()),
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, S>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    execute(&cli.command, &argv)
}

pub fn execute(command: &Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Toy(a) => toy_cmd(a, argv),
        Command::TrainClassifier(a) => train_classifier_cmd(a, argv),
        Command::Annotate(a) => annotate_cmd(a, argv),
        Command::Train(a) => train_cmd(a, argv).map(|_| ()),
        Command::Generate(a) => generate_cmd(a, argv),
        Command::Eval(a) => eval_cmd(a, argv).map(|_| ()),
        Command::Serve(a) => serve_cmd(a),
        Command::Policy(a) => {
            let policy = load_policy(a.policy.as_deref(), &a.ablation)?;
            // A closed pipe (`| head`) is not an error.
            match writeln!(std::io::stdout().lock(), "{}", policy.to_json()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn toy_cmd(a: &ToyArgs, argv: &[String]) -> Result<()> {
    let mut config: ToyConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ToyConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let corpus = toy::generate(&config);
    corpus.split.save(&a.out)?;
    let tsv = |pairs: &[(String, String)]| pairs.iter().map(|(s, l)| format!("{l}\t{s}\n")).collect::<String>();
    let files = [
        ("da_sentences.tsv", tsv(&corpus.da_examples)),
        ("emotion_sentences.tsv", tsv(&corpus.emotion_examples)),
        ("stoplist.txt", corpus.stoplist.iter().map(|w| format!("{w}\n")).collect()),
        ("topical_words.txt", corpus.topical_words.iter().map(|w| format!("{w}\n")).collect()),
    ];
    for (name, body) in &files {
        fs::write(a.out.join(name), body)?;
    }
    let mut outputs: Vec<PathBuf> = Split::ALL.iter().map(|s| a.out.join(s.file_name())).collect();
    outputs.extend(files.iter().map(|(n, _)| a.out.join(n)));
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&a.out.join("toy"), argv, &config, &[], &outputs, Vec::new())?;
    eprintln!(
        "wrote {} train, {} valid, {} test sessions to {}",
        corpus.split.train.len(),
        corpus.split.valid.len(),
        corpus.split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn read_labeled(path: &Path) -> Result<Vec<(String, String)>> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (label, sentence) =
                l.split_once('\t').with_context(|| format!("{}:{}: expected `label<TAB>sentence`", path.display(), i + 1))?;
            Ok((sentence.to_string(), label.to_string()))
        })
        .collect()
}

fn train_classifier_cmd(a: &TrainClassifierArgs, argv: &[String]) -> Result<()> {
    let labeled = read_labeled(&a.examples)?;
    let label_set: Vec<String> = match a.kind {
        ClassifierKind::DialogueAct => DialogueAct::ALL.iter().map(|l| l.name().to_string()).collect(),
        ClassifierKind::Emotion => Emotion::ALL.iter().map(|l| l.name().to_string()).collect(),
    };
    let options = TrainOptions { epochs: a.epochs, seed: a.seed, ..TrainOptions::default() };
    let clf = train_classifier(&labeled, &label_set, &options)?;
    ensure_parent(&a.out)?;
    clf.save(&a.out)?;
    eprintln!("train accuracy {:.4} on {} sentences", clf.metadata().train_accuracy, labeled.len());
    write_manifest(&a.out, argv, &(a, &options), &[&a.examples], &[&a.out], Vec::new())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(s.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn annotate_cmd(a: &AnnotateArgs, argv: &[String]) -> Result<()> {
    let sessions = load_corpus(&a.corpus)?;
    let vocab = match &a.vocab {
        Some(p) => TopicalVocabulary::load(p)?,
        None => {
            let stoplist = a.stoplist.as_deref().map(read_lines).transpose()?.unwrap_or_default();
            build_topical_vocabulary(&sessions, a.vocab_size, stoplist)?
        }
    };
    let da = LinearClassifier::load(&a.da_clf)?;
    let emo = LinearClassifier::load(&a.emo_clf)?;
    let annotated = annotate_corpus(&sessions, &vocab, &da, &emo)?;
    ensure_parent(&a.out)?;
    save_corpus(&annotated, &a.out)?;
    let vocab_out = a.out.with_extension("vocab.txt");
    vocab.save(&vocab_out)?;
    let mut inputs = vec![a.corpus.as_path(), a.da_clf.as_path(), a.emo_clf.as_path()];
    inputs.extend(a.vocab.as_deref().or(a.stoplist.as_deref()));
    write_manifest(&a.out, argv, a, &inputs, &[&a.out, &vocab_out], Vec::new())?;
    eprintln!("annotated {} sessions with {} topical phrases", annotated.len(), vocab.len());
    Ok(())
}

/// Everything that determines a trained checkpoint.
#[derive(Serialize)]
struct TrainKey<'a> {
    train: &'a str,
    valid: &'a str,
    config: &'a ModelConfig,
    schedule: &'a TrainSchedule,
    scheme: &'a LinearizationScheme,
}

/// Outcome of `train`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub cache_hit: bool,
    /// Wall time of the run that produced the checkpoint, which for a cache
    /// hit is the original run.
    pub train_seconds: Option<f64>,
}

/// Trains (or fetches from the cache) and writes the checkpoint.
pub fn train_cmd(a: &TrainArgs, argv: &[String]) -> Result<TrainRun> {
    let train_path = a.corpus.join(Split::Train.file_name());
    let valid_path = a.corpus.join(Split::Valid.file_name());
    let train = load_split(&a.corpus, Split::Train)?;
    let valid = load_split(&a.corpus, Split::Valid)?;
    let tokenizer = Tokenizer::from_corpus(&train);
    let mut config = match (&a.model_config, a.preset) {
        (Some(p), _) => read_json::<ModelConfig>(p)?,
        (None, Preset::Toy) => ModelConfig::toy(0),
        (None, Preset::Desk) => ModelConfig::default(),
    };
    config.vocab_size = tokenizer.vocab_size();
    let mut schedule = match (&a.schedule, a.preset) {
        (Some(p), _) => read_json::<TrainSchedule>(p)?,
        (None, Preset::Toy) => TrainSchedule::toy(),
        (None, Preset::Desk) => TrainSchedule::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
        schedule.seed = seed;
    }
    let mut scheme = LinearizationScheme { max_sequence_length: config.max_positions, ..LinearizationScheme::default() };
    a.ablation.apply_scheme(&mut scheme);
    if a.ablation.no_repetition_constraint || a.ablation.no_topical_min_length {
        eprintln!("note: decoding ablations have no effect on training");
    }

    let key = TrainKey {
        train: &sha256_file(&train_path)?,
        valid: &sha256_file(&valid_path)?,
        config: &config,
        schedule: &schedule,
        scheme: &scheme,
    };
    let digest: String = Sha256::digest(serde_json::to_vec(&key)?).iter().map(|b| format!("{b:02x}")).collect();
    let cache_dir = a.cache.clone().or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from));
    let cached = cache_dir.map(|d| d.join(format!("{digest}.ckpt")));

    ensure_parent(&a.out)?;
    let mut notes = vec![format!("training key {digest}")];
    let hit = cached.as_ref().is_some_and(|p| p.is_file());
    let train_seconds;
    if let (true, Some(p)) = (hit, &cached) {
        fs::copy(p, &a.out).with_context(|| format!("copying {}", p.display()))?;
        train_seconds = fs::read_to_string(p.with_extension("seconds")).ok().and_then(|s| s.trim().parse::<f64>().ok());
        notes.push(format!("copied from cache {}", p.display()));
        eprintln!("checkpoint taken from cache {}", p.display());
    } else {
        let started = std::time::Instant::now();
        let trained = train_checkpoint(&train, &valid, tokenizer, &scheme, &config, &schedule, |r| {
            eprintln!(
                "step {:>6}  loss {:.4}  valid ppl {}  lr {:.2e}",
                r.step,
                r.train_loss,
                r.valid_ppl.map_or("-".into(), |p| format!("{p:.3}")),
                r.lr
            );
        })?;
        let seconds = started.elapsed().as_secs_f64();
        train_seconds = Some(seconds);
        trained.checkpoint.save(&a.out)?;
        let m = &trained.checkpoint.metadata;
        eprintln!("stopped after {} steps ({:?}) in {seconds:.1} s; wrote {}", m.steps, m.stop_reason, a.out.display());
        if let Some(p) = &cached {
            store_in_cache(&a.out, p, seconds)?;
        }
    }
    if let Some(s) = train_seconds {
        notes.push(format!("train seconds {s:.3}"));
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a TrainArgs,
        config: &'a ModelConfig,
        schedule: &'a TrainSchedule,
        scheme: &'a LinearizationScheme,
    }
    let resolved = Resolved { args: a, config: &config, schedule: &schedule, scheme: &scheme };
    write_manifest(&a.out, argv, &resolved, &[&train_path, &valid_path], &[&a.out], notes)?;
    Ok(TrainRun { cache_hit: hit, train_seconds })
}

/// Copies `ckpt` into the cache through a temporary name, so a concurrent
/// reader never sees a partial file.
fn store_in_cache(ckpt: &Path, entry: &Path, seconds: f64) -> Result<()> {
    fs::create_dir_all(entry.parent().expect("cache file has a parent"))?;
    let tmp = entry.with_extension(format!("tmp{}", std::process::id()));
    fs::copy(ckpt, &tmp).with_context(|| format!("caching to {}", tmp.display()))?;
    fs::write(entry.with_extension("seconds"), format!("{seconds}\n"))?;
    fs::rename(&tmp, entry).with_context(|| format!("caching to {}", entry.display()))?;
    Ok(())
}

pub fn load_policy(path: Option<&Path>, ablation: &Ablation) -> Result<DecodingPolicy> {
    let mut policy = match path {
        Some(p) => DecodingPolicy::load(p)?,
        None => DecodingPolicy::default(),
    };
    ablation.apply(&mut policy);
    policy.validate()?;
    Ok(policy)
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn history(s: &AnnotatedSession, upto: usize) -> Vec<HistoryEntry> {
    s.utterances[..upto]
        .iter()
        .map(|u| HistoryEntry { speaker: u.speaker, text: u.text.clone(), annotation: u.annotation.clone() })
        .collect()
}

fn generate_cmd(a: &GenerateArgs, argv: &[String]) -> Result<()> {
    let d = &a.decode;
    let ckpt = load_checkpoint(&d.checkpoint)?;
    let policy = load_policy(d.policy.as_deref(), &d.ablation)?;
    let decoder = Decoder::new(&ckpt, &ckpt.tokenizer, &ckpt.scheme, &policy)?;
    let mut turns = Vec::new();
    match (&a.corpus, &a.text) {
        (Some(path), _) => {
            for s in load_corpus(path)? {
                for i in 1..s.utterances.len() {
                    if s.utterances[i - 1].speaker != Speaker::Human || s.utterances[i].speaker != Speaker::Machine {
                        continue;
                    }
                    let seed = d.seed.wrapping_add(turns.len() as u64);
                    let trace = decoder.respond(&s.context, &history(&s, i - 1), &s.utterances[i - 1].text, None, seed)?;
                    turns.push(GeneratedTurn { session_id: Some(s.session_id.clone()), utterance: Some(i), trace });
                }
            }
        }
        (None, Some(text)) => {
            let trace = decoder.respond(&a.context, &[], text, None, d.seed)?;
            turns.push(GeneratedTurn { session_id: None, utterance: None, trace });
        }
        (None, None) => bail!("either --corpus or --text is required"),
    }
    ensure_parent(&a.out)?;
    let mut f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for t in &turns {
        writeln!(f, "{}", serde_json::to_string(t)?)?;
    }
    drop(f);
    if a.text.is_some() {
        println!("{}", turns[0].trace.response);
    }
    let mut inputs = vec![d.checkpoint.as_path()];
    inputs.extend(a.corpus.as_deref().into_iter().chain(d.policy.as_deref()));
    write_manifest(&a.out, argv, &(a, &policy), &inputs, &[&a.out], Vec::new())?;
    eprintln!("wrote {} traces to {}", turns.len(), a.out.display());
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs, argv: &[String]) -> Result<EvalReport> {
    let d = &a.decode;
    let ckpt = load_checkpoint(&d.checkpoint)?;
    let policy = load_policy(d.policy.as_deref(), &d.ablation)?;
    let sessions = load_corpus(&a.corpus)?;
    let decoder = Decoder::new(&ckpt, &ckpt.tokenizer, &ckpt.scheme, &policy)?;
    let embeddings = match &a.embeddings {
        Some(p) => EmbeddingTable::load(p)?,
        None => EmbeddingTable::random(ckpt.tokenizer.tokens().iter().map(String::as_str), 32, d.seed),
    };
    let classifiers = match (&a.da_clf, &a.emo_clf) {
        (Some(da), Some(emo)) => Some((LinearClassifier::load(da)?, LinearClassifier::load(emo)?)),
        _ => None,
    };
    let empty_vocab = TopicalVocabulary::from_phrases(Vec::new());
    let annotator = classifiers.as_ref().map(|(da, emo)| Annotator::new(&empty_vocab, da, emo)).transpose()?;
    let res = EvalResources {
        annotator: annotator.as_ref(),
        embeddings: &embeddings,
        segmenter: &PieceSegmenter,
        bleu_unit: match a.bleu_unit {
            UnitArg::Word => BleuUnit::Word,
            UnitArg::Char => BleuUnit::Char,
        },
    };
    let mode = match a.mode {
        ModeArg::Planned => EvalMode::Planned,
        ModeArg::Gold => EvalMode::GoldVariables,
    };
    let mut metrics = evaluate_generation(&decoder, &sessions, mode, &res, d.seed)?;
    if mode == EvalMode::GoldVariables {
        // Response perplexity given gold variables is tractable only here.
        let scheme = LinearizationScheme { max_sequence_length: ckpt.model.config().max_positions, ..decoder.scheme().clone() };
        let examples = training_examples(&sessions, &scheme, &ckpt.tokenizer)?;
        metrics.ppl = Some(evaluate_ppl(&ckpt.model, &examples, PplScope::MachineUttOnly)?);
    }
    let understanding = decoder.scheme().include_understanding.then(|| evaluate_understanding(&decoder, &sessions)).transpose()?;
    let report = EvalReport {
        variant: d.ablation.variant(),
        mode,
        seed: d.seed,
        policy: policy.clone(),
        table: metrics.table_row(),
        understanding,
        metrics,
    };
    write_json(&a.out, &report)?;
    let mut inputs = vec![d.checkpoint.as_path(), a.corpus.as_path()];
    inputs.extend([d.policy.as_deref(), a.embeddings.as_deref(), a.da_clf.as_deref(), a.emo_clf.as_deref()].into_iter().flatten());
    write_manifest(&a.out, argv, a, &inputs, &[&a.out], Vec::new())?;
    eprintln!("{} ({:?}): {}", report.variant, mode, serde_json::to_string(&report.table)?);
    Ok(report)
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let d = &a.decode;
    let policy = load_policy(d.policy.as_deref(), &d.ablation)?;
    let engine = Engine::from_checkpoint(&d.checkpoint, policy)?;
    let service = Arc::new(ChatService::new(engine));
    if let Some(p) = a.snapshot.as_deref().filter(|p| p.is_file()) {
        service.load_snapshot(p)?;
        eprintln!("restored {} sessions from {}", service.session_ids()?.len(), p.display());
    }
    let app = router(service.clone(), cors(a.cors_origin.as_deref())?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum_serve(listener, app).await
    })?;
    if let Some(p) = &a.snapshot {
        service.save_snapshot(p)?;
        eprintln!("saved sessions to {}", p.display());
    }
    Ok(())
}

async fn axum_serve(listener: tokio::net::TcpListener, app: dialplan_service::Router) -> Result<()> {
    dialplan_service::serve(listener, app, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
