//! Generated corpora for tests and demonstrations: every entity type owns a
//! disjoint surface vocabulary, and a matching set of precomputed token
//! vectors mimics a pretrained contextual encoder (one shared "entity"
//! direction, one centroid per type, filler words in their own cluster,
//! plus a little neighbour mixing).

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::crf::EntitySpan;
use crate::encoder::{EmbeddingStore, Sentence};
use crate::episodes::{AnnotatedSentence, Corpus};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Tensor};

/// Eight type names; the first four serve as source types and the last
/// four as target types in the end-to-end tests.
pub const TYPE_NAMES: [&str; 8] =
    ["person", "location", "organization", "event", "product", "artwork", "building", "disease"];

#[derive(Debug, Clone, PartialEq)]
pub struct LexiconConfig {
    pub types: Vec<String>,
    pub words_per_type: usize,
    pub filler_words: usize,
    pub dim: usize,
    /// Scale of the shared entity direction.
    pub entity_scale: f64,
    /// Scale of the per-type centroid.
    pub type_scale: f64,
    /// Per-word noise scale.
    pub noise: f64,
    /// Weight of each neighbour's vector mixed into a token's vector.
    pub context: f64,
    pub seed: u64,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        Self {
            types: TYPE_NAMES.iter().map(|s| s.to_string()).collect(),
            words_per_type: 12,
            filler_words: 40,
            dim: 32,
            entity_scale: 1.5,
            type_scale: 1.0,
            noise: 0.15,
            context: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceShape {
    pub sentences: usize,
    pub max_entities: usize,
    pub max_entity_len: usize,
    /// Upper bound on filler tokens before, between and after entities.
    pub max_gap: usize,
}

impl Default for SentenceShape {
    fn default() -> Self {
        Self { sentences: 200, max_entities: 2, max_entity_len: 3, max_gap: 3 }
    }
}

/// Word lists and fixed word vectors shared by every corpus drawn from it.
#[derive(Debug, Clone)]
pub struct Lexicon {
    config: LexiconConfig,
    type_words: Vec<Vec<String>>,
    fillers: Vec<String>,
    vectors: HashMap<String, Vec<f64>>,
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

impl Lexicon {
    pub fn new(config: LexiconConfig) -> Result<Self> {
        if config.types.is_empty() || config.words_per_type == 0 || config.filler_words == 0 || config.dim == 0 {
            return Err(Error::Config("lexicon needs types, words and a positive dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.dim;
        let entity_dir = unit_vector(&mut rng, dim);
        let filler_dir = unit_vector(&mut rng, dim);
        let mut vectors = HashMap::new();
        let word = |rng: &mut ChaCha8Rng, base: &[f64]| -> Vec<f64> {
            base.iter().map(|b| b + config.noise * rng.sample::<f64, _>(StandardNormal)).collect()
        };

        let mut type_words = Vec::new();
        for (t, name) in config.types.iter().enumerate() {
            let centroid = unit_vector(&mut rng, dim);
            let base: Vec<f64> = entity_dir
                .iter()
                .zip(&centroid)
                .map(|(e, c)| config.entity_scale * e + config.type_scale * c)
                .collect();
            let prefix: String = name.chars().take(3).collect();
            let words: Vec<String> = (0..config.words_per_type).map(|i| format!("{prefix}{t}_{i}")).collect();
            for w in &words {
                vectors.insert(w.clone(), word(&mut rng, &base));
            }
            type_words.push(words);
        }
        let filler_base: Vec<f64> = filler_dir.iter().map(|f| config.entity_scale * f).collect();
        let fillers: Vec<String> = (0..config.filler_words).map(|i| format!("w{i}")).collect();
        for w in &fillers {
            vectors.insert(w.clone(), word(&mut rng, &filler_base));
        }
        Ok(Self { config, type_words, fillers, vectors })
    }

    pub fn config(&self) -> &LexiconConfig {
        &self.config
    }

    pub fn types(&self) -> &[String] {
        &self.config.types
    }

    /// Sentences whose entities all come from `types`. Entities never touch:
    /// at least one filler token separates any two. Sentence ids are
    /// `<prefix>:<index>`.
    pub fn corpus(&self, types: &[String], shape: &SentenceShape, prefix: &str, seed: u64) -> Result<Corpus> {
        let indices: Vec<usize> = types
            .iter()
            .map(|t| {
                self.config
                    .types
                    .iter()
                    .position(|x| x == t)
                    .ok_or_else(|| Error::Config(format!("type {t:?} not in lexicon")))
            })
            .collect::<Result<_>>()?;
        if indices.is_empty() || shape.max_entities == 0 || shape.max_entity_len == 0 || shape.max_gap == 0 {
            return Err(Error::Config("sentence shape needs positive bounds and at least one type".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[self.config.seed]));
        let mut sentences = Vec::with_capacity(shape.sentences);
        for s in 0..shape.sentences {
            let mut tokens = Vec::new();
            let mut spans = Vec::new();
            let entities = rng.gen_range(1..=shape.max_entities);
            for e in 0..entities {
                let min_gap = usize::from(e > 0);
                for _ in 0..rng.gen_range(min_gap..=shape.max_gap) {
                    tokens.push(self.fillers.choose(&mut rng).expect("fillers").clone());
                }
                let t = indices[rng.gen_range(0..indices.len())];
                let len = rng.gen_range(1..=shape.max_entity_len);
                let start = tokens.len();
                for _ in 0..len {
                    tokens.push(self.type_words[t].choose(&mut rng).expect("words").clone());
                }
                spans.push(EntitySpan::typed(start, start + len - 1, self.config.types[t].clone()));
            }
            for _ in 0..rng.gen_range(0..=shape.max_gap) {
                tokens.push(self.fillers.choose(&mut rng).expect("fillers").clone());
            }
            let sentence = Sentence::new(format!("{prefix}:{s}"), tokens)?;
            sentences.push(AnnotatedSentence::new(sentence, spans)?);
        }
        Ok(Corpus::from_sentences(sentences))
    }

    /// Contextual vectors for every sentence of `corpus`: each token's word
    /// vector plus `context` times each neighbour's word vector.
    pub fn embed(&self, corpus: &Corpus) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new();
        let dim = self.config.dim;
        for s in &corpus.sentences {
            let words: Vec<&Vec<f64>> = s
                .sentence
                .tokens
                .iter()
                .map(|t| {
                    self.vectors
                        .get(t)
                        .ok_or_else(|| Error::invalid(format!("token {t:?} not in lexicon")))
                })
                .collect::<Result<_>>()?;
            let n = words.len();
            let mut data = Vec::with_capacity(n * dim);
            for i in 0..n {
                for j in 0..dim {
                    let mut v = words[i][j];
                    if i > 0 {
                        v += self.config.context * words[i - 1][j];
                    }
                    if i + 1 < n {
                        v += self.config.context * words[i + 1][j];
                    }
                    // Stored as f32 on disk; round now so files reproduce it.
                    data.push(f64::from(v as f32));
                }
            }
            store.insert(s.sentence.id.clone(), Tensor::matrix(n, dim, data)?)?;
        }
        Ok(store)
    }
}

/// Source/target split of [`TYPE_NAMES`].
pub fn source_types() -> Vec<String> {
    TYPE_NAMES[..4].iter().map(|s| s.to_string()).collect()
}

pub fn target_types() -> Vec<String> {
    TYPE_NAMES[4..].iter().map(|s| s.to_string()).collect()
}
