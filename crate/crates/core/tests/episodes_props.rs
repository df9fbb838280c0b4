//! Corpus round trips, episode sampling invariants and span-level F1.

mod common;

use std::collections::HashSet;

use msfner::crf::EntitySpan;
use msfner::encoder::Sentence;
use msfner::episodes::{
    load_episodes, mean_std, micro_f1, parse_corpus_str, sample_episode, sample_episode_with, serialize_corpus,
    write_episodes, AnnotatedSentence, Corpus, CorpusFormat, Episode, SamplerConfig,
};
use msfner::Error;
use proptest::prelude::*;

const TYPES: [&str; 3] = ["per", "loc", "org"];

/// Sentences with typed, non-overlapping spans. With `gapped`, entities
/// never touch, which IO tagging needs to keep neighbours apart.
fn corpus_strategy(gapped: bool) -> impl Strategy<Value = Corpus> {
    let sentence = (1usize..12).prop_flat_map(move |n| {
        (
            prop::collection::vec("[a-z]{1,5}", n),
            prop::collection::vec((0usize..3, 1usize..4, 0usize..3), 0..4),
        )
            .prop_map(move |(tokens, pieces)| (tokens, pieces, gapped))
    });
    prop::collection::vec(sentence, 1..6).prop_map(|raw| {
        let sentences = raw
            .into_iter()
            .enumerate()
            .map(|(i, (tokens, pieces, gapped))| {
                let n = tokens.len();
                let mut spans = Vec::new();
                let mut at = 0;
                for (gap, len, ty) in pieces {
                    let start = at + gap + usize::from(gapped && !spans.is_empty());
                    let end = start + len - 1;
                    if end >= n {
                        break;
                    }
                    spans.push(EntitySpan::typed(start, end, TYPES[ty]));
                    at = end + 1;
                }
                AnnotatedSentence::new(Sentence::new(format!("c:{i}"), tokens).unwrap(), spans).unwrap()
            })
            .collect();
        Corpus::from_sentences(sentences)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bioes_parse_inverts_serialize(corpus in corpus_strategy(false)) {
        let text = serialize_corpus(&corpus, CorpusFormat::BioesTyped);
        let back = parse_corpus_str(&text, "c", "mem", CorpusFormat::BioesTyped, 128).unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn io_parse_inverts_serialize(corpus in corpus_strategy(true)) {
        let text = serialize_corpus(&corpus, CorpusFormat::IoTyped);
        let back = parse_corpus_str(&text, "c", "mem", CorpusFormat::IoTyped, 128).unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn f1_ignores_sentence_and_span_order(corpus in corpus_strategy(false), drop in 0usize..3) {
        let gold: Vec<Vec<EntitySpan>> = corpus.sentences.iter().map(|s| s.spans.clone()).collect();
        // Predictions: gold minus every `drop+1`-th span, plus a retyped copy.
        let pred: Vec<Vec<EntitySpan>> = gold
            .iter()
            .map(|spans| {
                let mut out: Vec<EntitySpan> = spans.iter().enumerate().filter(|(i, _)| i % (drop + 2) != 0).map(|(_, s)| s.clone()).collect();
                if let Some(first) = spans.first() {
                    out.push(EntitySpan::typed(first.start, first.end, "misc"));
                }
                out
            })
            .collect();
        let base = micro_f1(&pred, &gold).unwrap();
        let rev = |v: &[Vec<EntitySpan>]| -> Vec<Vec<EntitySpan>> {
            v.iter().rev().map(|s| s.iter().rev().cloned().collect()).collect()
        };
        prop_assert_eq!(micro_f1(&rev(&pred), &rev(&gold)).unwrap(), base);
        prop_assert!(base.f1 <= 1.0);
        prop_assert_eq!(micro_f1(&gold, &gold).unwrap().f1 == 1.0, gold.iter().any(|s| !s.is_empty()));
    }
}

#[test]
fn hand_scored_reports() {
    let t = |s, e, ty| EntitySpan::typed(s, e, ty);
    // Two exact hits, one wrong type, one missed, one spurious.
    let gold = vec![vec![t(0, 1, "per")], vec![t(2, 2, "loc")], vec![t(0, 0, "org"), t(3, 4, "per")]];
    let pred = vec![vec![t(0, 1, "per")], vec![t(2, 2, "org")], vec![t(3, 4, "per"), t(1, 1, "loc")]];
    let r = micro_f1(&pred, &gold).unwrap();
    assert_eq!((r.predicted, r.gold, r.correct), (4, 4, 2));
    assert!((r.precision - 0.5).abs() < 1e-12);
    assert!((r.recall - 0.5).abs() < 1e-12);
    assert!((r.f1 - 0.5).abs() < 1e-12);

    let none = micro_f1(&[vec![]], &[vec![t(0, 0, "per")]]).unwrap();
    assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    assert!(micro_f1(&[vec![]], &[]).is_err());

    let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
    assert!((m - 0.7).abs() < 1e-12 && (s - 0.2).abs() < 1e-12);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let cases = [
        ("a\tO\nb O\n", 2),
        ("a\tO\n\nb\tX-per\n", 3),
        ("a\t\n", 1),
        ("a\tO\n\nb\tO\nc\tO\nd\tO\n", 3),
    ];
    for (text, line) in cases {
        match parse_corpus_str(text, "c", "mem.txt", CorpusFormat::BioesTyped, 2) {
            Err(Error::Parse { line: got, path, .. }) => {
                assert_eq!(got, line, "{text:?}");
                assert_eq!(path, "mem.txt");
            }
            other => panic!("{text:?}: expected a parse error, got {other:?}"),
        }
    }
    let crlf = parse_corpus_str("a\tper\r\nb\tO\r\n", "c", "mem", CorpusFormat::IoTyped, 8).unwrap();
    assert_eq!(crlf.sentences[0].spans, vec![EntitySpan::typed(0, 0, "per")]);
}

fn sampling_world() -> Corpus {
    common::world(10, 10, 200).target
}

#[test]
fn sampled_episodes_respect_shot_bounds_and_disjointness() {
    let corpus = sampling_world();
    for (n, k) in [(2, 1), (4, 1), (4, 2), (3, 3)] {
        for seed in 0..20 {
            let e = sample_episode(&corpus, n, k, seed).unwrap();
            assert_eq!(e.types.len(), n);
            for set in [&e.support, &e.query] {
                let mut counts = vec![0; n];
                for s in set.iter() {
                    for sp in &s.spans {
                        let i = e.types.iter().position(|t| t == AnnotatedSentence::label_of(sp)).unwrap();
                        counts[i] += 1;
                    }
                }
                assert!(counts.iter().all(|&c| (k..=2 * k).contains(&c)), "{n}-way {k}-shot: {counts:?}");
            }
            let ids: HashSet<&str> = e.support.iter().map(|s| s.sentence.id.as_str()).collect();
            assert!(e.query.iter().all(|s| !ids.contains(s.sentence.id.as_str())));
            e.check_coverage().unwrap();
            assert_eq!(sample_episode(&corpus, n, k, seed).unwrap(), e);
        }
    }
}

#[test]
fn infeasible_requests_fail_cleanly() {
    let corpus = sampling_world();
    assert!(matches!(sample_episode(&corpus, 5, 1, 0), Err(Error::Infeasible(_))));
    let huge = SamplerConfig { query_k: Some(500), ..SamplerConfig::new(2, 1) };
    assert!(matches!(sample_episode_with(&corpus, &huge, 0), Err(Error::Infeasible(_))));
}

#[test]
fn episode_files_round_trip() {
    let corpus = sampling_world();
    let episodes: Vec<Episode> = (0..3).map(|s| sample_episode(&corpus, 2, 1, s).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.jsonl");
    write_episodes(&path, &episodes).unwrap();
    assert_eq!(load_episodes(&path).unwrap(), episodes);

    let single = dir.path().join("one.json");
    std::fs::write(&single, r#"{"n":1,"k":1,"types":["per"],"support":[{"tokens":["a","b"],"spans":[[1,1,"per"]]}],"query":[]}"#).unwrap();
    let e = &load_episodes(&single).unwrap()[0];
    assert_eq!(e.support[0].sentence.id, "support:0");
    assert_eq!(e.support[0].spans, vec![EntitySpan::typed(1, 1, "per")]);
}
