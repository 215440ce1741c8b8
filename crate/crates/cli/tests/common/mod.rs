//! Shared setup for the CLI test targets: a toy corpus with classifiers,
//! trained models and helpers that drive the command line in process.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Parser;
use dialplan_cli::{eval_cmd, train_cmd, Cli, Command, EvalReport, TrainRun};

/// Fresh directory under the target's scratch area.
pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Checkpoint cache shared by all test runs; entries are keyed by the
/// digest of the training data and every training setting.
pub fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("checkpoint-cache")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("dialplan").chain(args.iter().copied()).map(String::from).collect()
}

pub fn dialplan(args: &[&str]) -> Result<()> {
    dialplan_cli::run(argv(args))
}

pub fn train(args: &[&str]) -> Result<TrainRun> {
    let argv = argv(&[&["train"], args].concat());
    match Cli::try_parse_from(&argv)?.command {
        Command::Train(a) => train_cmd(&a, &argv),
        _ => bail!("not a train command"),
    }
}

pub fn eval(args: &[&str]) -> Result<EvalReport> {
    let argv = argv(&[&["eval"], args].concat());
    match Cli::try_parse_from(&argv)?.command {
        Command::Eval(a) => eval_cmd(&a, &argv),
        _ => bail!("not an eval command"),
    }
}

/// Toy corpus and the two label classifiers trained on its sentences.
pub struct Toy {
    pub dir: PathBuf,
    pub corpus: PathBuf,
    pub da_clf: PathBuf,
    pub emo_clf: PathBuf,
}

impl Toy {
    pub fn create(dir: &Path) -> Result<Toy> {
        let corpus = dir.join("toy");
        dialplan(&["toy", "--out", s(&corpus)])?;
        let da_clf = dir.join("da.clf");
        let emo_clf = dir.join("emo.clf");
        let da_tsv = corpus.join("da_sentences.tsv");
        let emo_tsv = corpus.join("emotion_sentences.tsv");
        dialplan(&["train-classifier", "--examples", s(&da_tsv), "--kind", "dialogue-act", "--out", s(&da_clf)])?;
        dialplan(&["train-classifier", "--examples", s(&emo_tsv), "--kind", "emotion", "--out", s(&emo_clf)])?;
        Ok(Toy { dir: dir.to_path_buf(), corpus, da_clf, emo_clf })
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.corpus.join(format!("{name}.jsonl"))
    }

    /// Trains with the toy preset (through the cache) into `name`.
    pub fn train_toy(&self, name: &str, extra: &[&str]) -> Result<(PathBuf, TrainRun)> {
        let out = self.dir.join(name);
        let cache = cache_dir();
        let mut args = vec!["--corpus", s(&self.corpus), "--preset", "toy", "--cache", s(&cache), "--out", s(&out)];
        args.extend_from_slice(extra);
        let run = train(&args)?;
        Ok((out, run))
    }

    /// Evaluates `ckpt` on a split with the bundled classifiers.
    pub fn eval(&self, ckpt: &Path, split: &str, mode: &str, out: &str, extra: &[&str]) -> Result<EvalReport> {
        let corpus = self.split(split);
        let out = self.dir.join(out);
        let mut args = vec![
            "--checkpoint",
            s(ckpt),
            "--corpus",
            s(&corpus),
            "--mode",
            mode,
            "--da-clf",
            s(&self.da_clf),
            "--emo-clf",
            s(&self.emo_clf),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        eval(&args)
    }
}
