//! Analytic gradients of every trained objective against central
//! differences at 64-bit precision.

mod common;

use common::max_gradient_error;
use msfner::classifier::{contrastive_loss_node, ClassifierConfig, SimilarityMode};
use msfner::crf::{allowed_transitions, nll_node, spans_to_tags, transition_mask, EntitySpan, Tag};
use msfner::crf::{NUM_TAGS, TRANSITION_SIZE};
use msfner::encoder::{EmbeddingStore, EncoderConfig, Sentence, TokenEncoder, Vocab};
use msfner::episodes::AnnotatedSentence;
use msfner::numerics::{ParamSet, Tensor};
use msfner::trainer::{Model, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-3;
const TOLERANCE: f64 = 1e-4;
const TRIALS: u64 = 6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_spans(rng: &mut ChaCha8Rng, n: usize) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut at = rng.gen_range(0..2);
    while at < n {
        let len = rng.gen_range(1..=3).min(n - at);
        spans.push(EntitySpan::new(at, at + len - 1));
        at += len + rng.gen_range(1..3);
    }
    spans
}

#[test]
fn crf_nll() {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let n = rng.gen_range(1..=6);
        let tags: Vec<Tag> = spans_to_tags(&random_spans(&mut rng, n), n).unwrap();
        let mut p = ParamSet::new();
        p.insert("em", random_tensor(&mut rng, &[n, NUM_TAGS], 2.0));
        p.insert("trans", random_tensor(&mut rng, &[TRANSITION_SIZE, TRANSITION_SIZE], 1.0));
        let err = max_gradient_error(
            &p,
            |g, b| {
                let allowed = g.constant(allowed_transitions());
                let mask = g.constant(transition_mask());
                let kept = g.mul(b.get("trans")?, allowed)?;
                let trans = g.add(kept, mask)?;
                nll_node(g, b.get("em")?, trans, &tags)
            },
            STEP,
            FLOOR,
        );
        assert!(err < TOLERANCE, "trial {trial}: {err:e}");
    }
}

#[test]
fn contrastive_both_modes() {
    for mode in [SimilarityMode::NegSqEuclid, SimilarityMode::GaussianKl] {
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let m = rng.gen_range(3..=6);
            let d = rng.gen_range(2..=4);
            let mut labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..3)).collect();
            labels[1] = labels[0];
            let mut p = ParamSet::new();
            p.insert("mean", random_tensor(&mut rng, &[m, d], 0.5));
            p.insert("log_var", random_tensor(&mut rng, &[m, d], 0.3));
            let err = max_gradient_error(
                &p,
                |g, b| contrastive_loss_node(g, b.get("mean")?, b.get("log_var")?, &labels, 0.1, mode),
                STEP,
                FLOOR,
            );
            assert!(err < TOLERANCE, "{mode:?} trial {trial}: {err:e}");
        }
    }
}

/// Sentences of 3 to 6 tokens with random vectors and random typed spans.
fn classifier_task(rng: &mut ChaCha8Rng, dim: usize, labels: &[String]) -> (Vec<AnnotatedSentence>, EmbeddingStore) {
    let mut store = EmbeddingStore::new();
    let mut sentences = Vec::new();
    // Two sentences per label guarantee coverage of every label.
    for (i, label) in labels.iter().chain(labels).enumerate() {
        let n = rng.gen_range(3..=6);
        let id = format!("s{i}");
        let tokens = (0..n).map(|j| format!("t{j}")).collect();
        store.insert(id.clone(), random_tensor(rng, &[n, dim], 1.0)).unwrap();
        let start = rng.gen_range(0..n);
        let end = (start + rng.gen_range(0..2)).min(n - 1);
        let span = EntitySpan::typed(start, end, label.clone());
        sentences.push(AnnotatedSentence::new(Sentence::new(id, tokens).unwrap(), vec![span]).unwrap());
    }
    (sentences, store)
}

#[test]
fn classifier_through_pooling_and_prototypes() {
    let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    for (mode, k) in [(SimilarityMode::NegSqEuclid, 1), (SimilarityMode::GaussianKl, 2)] {
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
            let encoder = common::precomputed_encoder(5, 4);
            let config = ClassifierConfig { projection_dim: 3, similarity: Some(mode), ..ClassifierConfig::default() };
            let model = common::ec(encoder, config);
            let (sentences, store) = classifier_task(&mut rng, 5, &labels);
            let (support, query) = sentences.split_at(labels.len());
            let task = TaskSpec::new(&model, labels.clone(), k, 0.5);
            let params = model.init_params(trial);
            let err = max_gradient_error(
                &params,
                |g, b| model.task_loss(g, b, support, query, &task, Some(&store), None),
                STEP,
                FLOOR,
            );
            assert!(err < TOLERANCE, "{mode:?} trial {trial}: {err:e}");
        }
    }
}

#[test]
fn trainable_encoder_with_dropout() {
    let words: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build(words.iter().map(String::as_str), 100);
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let config = EncoderConfig { embed_dim: 3, hidden_dim: 4, window: 1, dropout: 0.2, ..EncoderConfig::default() };
        let model = common::esd(TokenEncoder::trainable(config, vocab.clone()).unwrap());
        let Model::Esd(detector) = &model else { unreachable!() };
        let n = rng.gen_range(2..=6);
        // Includes an out-of-vocabulary token.
        let tokens: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..10))).collect();
        let sentence = Sentence::new("s", tokens).unwrap();
        let tags = spans_to_tags(&random_spans(&mut rng, n), n).unwrap();
        let params = model.init_params(trial);
        let err = max_gradient_error(
            &params,
            |g, b| detector.sentence_nll(g, b, &sentence, &tags, None, Some(trial)),
            STEP,
            FLOOR,
        );
        assert!(err < TOLERANCE, "trial {trial}: {err:e}");
    }
}
