//! Flat `key = value` run configuration shared by every command.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::classifier::{ClassifierConfig, Distance, SimilarityMode};
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::episodes::CorpusFormat;
use crate::error::{Error, Result};
use crate::knn::DecoderConfig;
use crate::numerics::Precision;
use crate::trainer::{OuterOptimizer, TrainerConfig};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "MSFNER_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub trainer: TrainerConfig,
    pub classifier: ClassifierConfig,
    pub decoder: DecoderConfig,
    pub corpus_format: CorpusFormat,
    pub train_corpus: Option<PathBuf>,
    pub valid_corpus: Option<PathBuf>,
    /// Precomputed embedding files; required in precomputed mode.
    pub embeddings: Vec<PathBuf>,
    /// Explicit seed; `None` falls back to the environment, then 0.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            trainer: TrainerConfig::default(),
            classifier: ClassifierConfig::default(),
            decoder: DecoderConfig::default(),
            corpus_format: CorpusFormat::IoTyped,
            train_corpus: None,
            valid_corpus: None,
            embeddings: Vec::new(),
            seed: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        let mut config = Self::default();
        config.apply_str(&text, &path.display().to_string())?;
        Ok(config)
    }

    /// Applies every `key = value` line of `text`. `#` starts a comment.
    pub fn apply_str(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{source}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Sets one field by its config key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (e, t, c, d) = (&mut self.encoder, &mut self.trainer, &mut self.classifier, &mut self.decoder);
        match key {
            "seed" => self.seed = Some(parse(key, value)?),
            "corpus_format" => self.corpus_format = parse(key, value)?,
            "train_corpus" => self.train_corpus = optional_path(value),
            "valid_corpus" => self.valid_corpus = optional_path(value),
            "embeddings" => {
                self.embeddings = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "encoder_mode" => {
                e.mode = match value {
                    "trainable" => EncoderMode::Trainable,
                    "precomputed" => EncoderMode::Precomputed,
                    _ => return Err(Error::Config(format!("{key}: expected trainable or precomputed"))),
                }
            }
            "vocab_size" => e.vocab_size = parse(key, value)?,
            "embed_dim" => e.embed_dim = parse(key, value)?,
            "hidden_dim" => e.hidden_dim = parse(key, value)?,
            "input_dim" => e.input_dim = parse(key, value)?,
            "window" => e.window = parse(key, value)?,
            "dropout" => e.dropout = parse(key, value)?,
            "max_len" => e.max_len = parse(key, value)?,
            "inner_lr" => t.inner_lr = parse(key, value)?,
            "lr" => t.outer_lr = parse(key, value)?,
            "outer_optimizer" => t.outer_optimizer = parse::<OuterOptimizer>(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "weight_decay" => t.adam.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "contrastive_weight" => t.contrastive_weight = parse(key, value)?,
            "finetune_steps" => t.finetune_steps = parse(key, value)?,
            "valid_interval" => t.valid_interval = parse(key, value)?,
            "valid_episodes" => t.valid_episodes = parse(key, value)?,
            "n_way" => t.n_way = parse(key, value)?,
            "k_shot" => t.k_shot = parse(key, value)?,
            "query_k" => t.query_k = if value == "auto" { None } else { Some(parse(key, value)?) },
            "precision" => {
                t.precision = match value {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => return Err(Error::Config(format!("{key}: expected f32 or f64"))),
                }
            }
            "projection_dim" => c.projection_dim = parse(key, value)?,
            "temperature" => c.temperature = parse(key, value)?,
            "similarity" => {
                c.similarity = match value {
                    "auto" => None,
                    "gaussian-kl" => Some(SimilarityMode::GaussianKl),
                    "neg-sq-euclid" => Some(SimilarityMode::NegSqEuclid),
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected auto, gaussian-kl or neg-sq-euclid"
                        )))
                    }
                }
            }
            "distance" => {
                c.distance = match value {
                    "sq-euclid" => Distance::SqEuclid,
                    "euclid" => Distance::Euclid,
                    _ => return Err(Error::Config(format!("{key}: expected sq-euclid or euclid"))),
                }
            }
            "knn_k" => d.k = parse(key, value)?,
            "knn_lambda" => d.lambda = parse(key, value)?,
            "knn_temperature" => d.temperature = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Explicit seed, else `MSFNER_SEED`, else 0.
    pub fn resolve_seed(&mut self) -> Result<u64> {
        let seed = match self.seed {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => parse(SEED_ENV, v.trim())?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        self.trainer.seed = seed;
        Ok(seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.trainer.validate()?;
        self.classifier.validate()?;
        self.decoder.validate()
    }

    /// Encoder mode and embedding files must agree. Only training builds a
    /// fresh encoder; other commands take the mode from a checkpoint.
    pub fn validate_encoder_inputs(&self) -> Result<()> {
        match self.encoder.mode {
            EncoderMode::Precomputed if self.embeddings.is_empty() => Err(Error::Config(
                "embeddings: precomputed encoder mode needs at least one embedding file".into(),
            )),
            EncoderMode::Trainable if !self.embeddings.is_empty() => Err(Error::Config(
                "embeddings: embedding files are only used with encoder_mode = precomputed".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Every key with its resolved value, in a form [`RunConfig::apply_str`]
    /// reads back.
    pub fn dump(&self) -> String {
        let (e, t, c, d) = (&self.encoder, &self.trainer, &self.classifier, &self.decoder);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.unwrap_or(t.seed).to_string()),
            ("corpus_format", match self.corpus_format {
                CorpusFormat::BioesTyped => "bioes-typed".into(),
                CorpusFormat::IoTyped => "io-typed".into(),
            }),
            ("train_corpus", path(&self.train_corpus)),
            ("valid_corpus", path(&self.valid_corpus)),
            (
                "embeddings",
                self.embeddings.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
            ("encoder_mode", match e.mode {
                EncoderMode::Trainable => "trainable".into(),
                EncoderMode::Precomputed => "precomputed".into(),
            }),
            ("vocab_size", e.vocab_size.to_string()),
            ("embed_dim", e.embed_dim.to_string()),
            ("hidden_dim", e.hidden_dim.to_string()),
            ("input_dim", e.input_dim.to_string()),
            ("window", e.window.to_string()),
            ("dropout", e.dropout.to_string()),
            ("max_len", e.max_len.to_string()),
            ("inner_lr", t.inner_lr.to_string()),
            ("lr", t.outer_lr.to_string()),
            ("outer_optimizer", match t.outer_optimizer {
                OuterOptimizer::Adaptive => "adaptive".into(),
                OuterOptimizer::Sgd => "sgd".into(),
            }),
            ("adam_beta1", t.adam.beta1.to_string()),
            ("adam_beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("weight_decay", t.adam.weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("steps", t.steps.to_string()),
            ("contrastive_weight", t.contrastive_weight.to_string()),
            ("finetune_steps", t.finetune_steps.to_string()),
            ("valid_interval", t.valid_interval.to_string()),
            ("valid_episodes", t.valid_episodes.to_string()),
            ("n_way", t.n_way.to_string()),
            ("k_shot", t.k_shot.to_string()),
            ("query_k", t.query_k.map_or("auto".into(), |q| q.to_string())),
            ("precision", match t.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            }),
            ("projection_dim", c.projection_dim.to_string()),
            ("temperature", c.temperature.to_string()),
            ("similarity", match c.similarity {
                None => "auto".into(),
                Some(SimilarityMode::GaussianKl) => "gaussian-kl".into(),
                Some(SimilarityMode::NegSqEuclid) => "neg-sq-euclid".into(),
            }),
            ("distance", match c.distance {
                Distance::SqEuclid => "sq-euclid".into(),
                Distance::Euclid => "euclid".into(),
            }),
            ("knn_k", d.k.to_string()),
            ("knn_lambda", d.lambda.to_string()),
            ("knn_temperature", d.temperature.to_string()),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
