//! On-disk fixtures for driving the `msfner` binary.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msfner::encoder::write_embedding_file;
use msfner::episodes::{serialize_corpus, CorpusFormat};
use msfner::synthetic::{source_types, target_types, Lexicon, LexiconConfig, SentenceShape};
use tempfile::TempDir;

/// Synthetic source, validation and target corpora written as BIOES
/// files, their vectors in one embedding file, and a run configuration
/// that points at them.
pub struct Fixture {
    pub dir: TempDir,
}

pub struct Sizes {
    pub train: usize,
    pub valid: usize,
    pub target: usize,
}

impl Fixture {
    pub fn new(sizes: Sizes, settings: &[(&str, &str)]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let lexicon = Lexicon::new(LexiconConfig::default()).unwrap();
        let mut store = msfner::encoder::EmbeddingStore::new();
        let parts = [
            ("train", sizes.train, source_types(), 1),
            ("valid", sizes.valid, source_types(), 2),
            ("target", sizes.target, target_types(), 3),
        ];
        for (name, n, types, seed) in parts {
            let shape = SentenceShape { sentences: n, ..SentenceShape::default() };
            let corpus = lexicon.corpus(&types, &shape, name, seed).unwrap();
            fs::write(dir.path().join(format!("{name}.txt")), serialize_corpus(&corpus, CorpusFormat::BioesTyped))
                .unwrap();
            store.merge(lexicon.embed(&corpus).unwrap()).unwrap();
        }
        let vectors = dir.path().join("vectors.msfe");
        write_embedding_file(&store, &vectors).unwrap();

        let mut conf = format!(
            "corpus_format = bioes-typed\nencoder_mode = precomputed\ninput_dim = 32\nhidden_dim = 32\nembeddings = {}\n",
            vectors.display()
        );
        for (k, v) in settings {
            conf.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(dir.path().join("run.conf"), conf).unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    /// Runs a subcommand with the fixture configuration.
    pub fn run(&self, command: &str, args: &[&str]) -> Output {
        let conf = self.arg("run.conf");
        let mut full = vec![command, "--config", conf.as_str()];
        full.extend_from_slice(args);
        msfner(&full)
    }

    /// Like `run`, panicking with stderr on failure.
    pub fn ok(&self, command: &str, args: &[&str]) -> String {
        let out = self.run(command, args);
        assert!(out.status.success(), "{command} {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    pub fn read(&self, name: &str) -> Vec<u8> {
        fs::read(self.path(name)).unwrap()
    }
}

pub fn msfner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfner")).args(args).env_remove("MSFNER_SEED").output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}
