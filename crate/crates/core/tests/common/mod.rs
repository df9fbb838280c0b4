//! Helpers shared by the integration tests.

#![allow(dead_code)]

use msfner::classifier::{ClassifierConfig, EntityClassifier};
use msfner::crf::SpanDetector;
use msfner::encoder::{EmbeddingStore, EncoderConfig, EncoderMode, TokenEncoder, Vocab};
use msfner::episodes::Corpus;
use msfner::numerics::{BoundParams, Graph, ParamSet, Var};
use msfner::synthetic::{source_types, target_types, Lexicon, LexiconConfig, SentenceShape};
use msfner::trainer::Model;
use msfner::Result;

/// Largest relative gap between the analytic gradient of `f` and central
/// differences, over every coordinate. Coordinates whose gradients are both
/// below `floor` are compared in absolute terms.
pub fn max_gradient_error<F>(params: &ParamSet, f: F, step: f64, floor: f64) -> f64
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let out = f(&mut g, &bound).unwrap();
    let analytic = g.backward(out).unwrap().collect(&bound, params).unwrap();
    let value = |p: &ParamSet| {
        let mut g = Graph::new();
        let bound = g.bind_frozen(p);
        let out = f(&mut g, &bound).unwrap();
        g.value(out).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        for i in 0..tensor.len() {
            let x = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + step;
            let up = value(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = x - step;
            let down = value(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(name).unwrap().data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    worst
}

/// Source, validation and target corpora from one lexicon, with their
/// precomputed vectors merged into a single store.
pub struct World {
    pub lexicon: Lexicon,
    pub train: Corpus,
    pub valid: Corpus,
    pub target: Corpus,
    pub store: EmbeddingStore,
}

pub fn world(train: usize, valid: usize, target: usize) -> World {
    let lexicon = Lexicon::new(LexiconConfig::default()).unwrap();
    let shape = |n| SentenceShape { sentences: n, ..SentenceShape::default() };
    let train = lexicon.corpus(&source_types(), &shape(train), "train", 1).unwrap();
    let valid = lexicon.corpus(&source_types(), &shape(valid), "valid", 2).unwrap();
    let target = lexicon.corpus(&target_types(), &shape(target), "target", 3).unwrap();
    let mut store = lexicon.embed(&train).unwrap();
    store.merge(lexicon.embed(&valid).unwrap()).unwrap();
    store.merge(lexicon.embed(&target).unwrap()).unwrap();
    World { lexicon, train, valid, target, store }
}

pub fn precomputed_encoder(dim: usize, hidden: usize) -> TokenEncoder {
    TokenEncoder::precomputed(EncoderConfig {
        mode: EncoderMode::Precomputed,
        input_dim: dim,
        hidden_dim: hidden,
        ..EncoderConfig::default()
    })
    .unwrap()
}

pub fn trainable_encoder(corpus: &Corpus, embed: usize, hidden: usize, dropout: f64) -> TokenEncoder {
    let config = EncoderConfig { embed_dim: embed, hidden_dim: hidden, dropout, ..EncoderConfig::default() };
    let vocab = Vocab::build(corpus.tokens(), config.vocab_size);
    TokenEncoder::trainable(config, vocab).unwrap()
}

pub fn esd(encoder: TokenEncoder) -> Model {
    Model::Esd(SpanDetector::new(encoder))
}

pub fn ec(encoder: TokenEncoder, config: ClassifierConfig) -> Model {
    Model::Ec(EntityClassifier::new(encoder, config).unwrap())
}
